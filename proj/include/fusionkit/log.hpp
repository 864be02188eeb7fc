#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>

namespace fusionkit::log {

enum class Level { error = 0, info = 1, debug = 2 };

// Resolved once from FUSIONKIT_LOG ({error|info|debug}, default error).
inline Level threshold() {
    static const Level level = [] {
        const char* env = std::getenv("FUSIONKIT_LOG");
        if (env == nullptr) return Level::error;
        if (std::strcmp(env, "debug") == 0) return Level::debug;
        if (std::strcmp(env, "info") == 0) return Level::info;
        return Level::error;
    }();
    return level;
}

template <typename... Args>
void emit(Level level, const char* tag, const char* fmt, Args... args) {
    if (level > threshold()) return;
    std::fprintf(stderr, "[%s] ", tag);
    std::fprintf(stderr, fmt, args...);
    std::fputc('\n', stderr);
}

template <typename... Args>
void error(const char* fmt, Args... args) {
    emit(Level::error, "error", fmt, args...);
}
template <typename... Args>
void info(const char* fmt, Args... args) {
    emit(Level::info, "info", fmt, args...);
}
template <typename... Args>
void debug(const char* fmt, Args... args) {
    emit(Level::debug, "debug", fmt, args...);
}

}  // namespace fusionkit::log
