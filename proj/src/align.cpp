#include "fusionkit/align.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace fusionkit::align {

namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

Eigen::MatrixXd glorot(int rows, int cols, Rng& rng) {
    const double limit = std::sqrt(6.0 / (rows + cols));
    Eigen::MatrixXd m(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) m(r, c) = rng.uniform(-limit, limit);
    return m;
}

}  // namespace

void AlignParams::validate() const {
    const int dl = d_lidar();
    const int dc = d_camera();
    const int da = d_attn();
    const int dm = d_mlp();
    if (dl <= 0 || dc <= 0 || da <= 0 || dm <= 0) fail("align params: empty dimension");
    if (b_q.size() != da || w_k.rows() != da || b_k.size() != da || w_v.rows() != da ||
        w_v.cols() != dc || b_v.size() != da)
        fail("align params: q/k/v dimensions do not chain");
    if (w_mlp.cols() != da || b_mlp.size() != dm) fail("align params: mlp dimensions do not chain");
    if (w_squeeze.rows() != dl || w_squeeze.cols() != dl + dm || b_squeeze.size() != dl)
        fail("align params: squeeze dimensions do not chain");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("align params: dropout_rate outside [0,1)");
    if (!w_q.allFinite() || !w_k.allFinite() || !w_v.allFinite() || !w_mlp.allFinite() ||
        !w_squeeze.allFinite() || !b_q.allFinite() || !b_k.allFinite() || !b_v.allFinite() ||
        !b_mlp.allFinite() || !b_squeeze.allFinite())
        fail("align params: weights must be finite");
}

AlignParams AlignParams::random(int d_lidar, int d_camera, int d_attn, int d_mlp, uint64_t seed) {
    AlignParams p;
    Rng rng(Rng::derive(seed, 0xA /* align stream */));
    p.w_q = glorot(d_attn, d_lidar, rng);
    p.b_q = Eigen::VectorXd::Zero(d_attn);
    p.w_k = glorot(d_attn, d_camera, rng);
    p.b_k = Eigen::VectorXd::Zero(d_attn);
    p.w_v = glorot(d_attn, d_camera, rng);
    p.b_v = Eigen::VectorXd::Zero(d_attn);
    p.w_mlp = glorot(d_mlp, d_attn, rng);
    p.b_mlp = Eigen::VectorXd::Zero(d_mlp);
    p.w_squeeze = glorot(d_lidar, d_lidar + d_mlp, rng);
    p.b_squeeze = Eigen::VectorXd::Zero(d_lidar);
    p.validate();
    return p;
}

AlignParams AlignParams::standard(int d_lidar, int d_camera, uint64_t seed) {
    return random(d_lidar, d_camera, 256, 192, seed);
}

DropoutMask DropoutMask::sample(int n, double rate, Rng& rng) {
    if (!(rate >= 0.0 && rate < 1.0)) fail("dropout mask: rate outside [0,1)");
    DropoutMask mask;
    mask.keep.resize(static_cast<size_t>(n));
    for (auto& k : mask.keep) k = rng.bernoulli(rate) ? 0 : 1;
    mask.scale = 1.0 / (1.0 - rate);
    return mask;
}

CameraFeatureSet gather_camera_features(std::span<const Vec3> members, const augment::AugRecord& record,
                                        const geometry::CameraModel& cam,
                                        const geometry::FeatureMap& fm, int max_n,
                                        int64_t pillar_index) {
    if (max_n < 1) fail("gather_camera_features: max_n must be >= 1");

    std::vector<geometry::Pixel> pixels;
    std::vector<std::vector<float>> samples;
    std::vector<std::pair<int, int>> seen_cells;

    for (const Vec3& member : members) {
        const Vec3 original = augment::inverse_aug(member, record);
        const auto px = geometry::project_to_image(original, cam);
        if (!px) continue;
        if (px->u >= fm.pixel_width() || px->v >= fm.pixel_height()) continue;
        const std::pair<int, int> cell{static_cast<int>(px->u / fm.scale),
                                       static_cast<int>(px->v / fm.scale)};
        if (std::find(seen_cells.begin(), seen_cells.end(), cell) != seen_cells.end()) continue;
        seen_cells.push_back(cell);
        pixels.push_back(*px);
        samples.push_back(geometry::bilinear_sample(fm, px->u, px->v));
    }

    // Bound the set; the seed is a pure function of the pillar so the same
    // subsample comes back on every run.
    if (static_cast<int>(samples.size()) > max_n) {
        std::vector<size_t> order(samples.size());
        std::iota(order.begin(), order.end(), 0);
        Rng rng(Rng::derive(0x9a7ce8ull /* gather stream */, static_cast<uint64_t>(pillar_index)));
        for (int i = 0; i < max_n; ++i) {
            const size_t j = i + static_cast<size_t>(rng.below(order.size() - i));
            std::swap(order[static_cast<size_t>(i)], order[j]);
        }
        order.resize(static_cast<size_t>(max_n));
        std::sort(order.begin(), order.end());
        std::vector<geometry::Pixel> kept_px;
        std::vector<std::vector<float>> kept_samples;
        for (size_t idx : order) {
            kept_px.push_back(pixels[idx]);
            kept_samples.push_back(samples[idx]);
        }
        pixels = std::move(kept_px);
        samples = std::move(kept_samples);
    }

    CameraFeatureSet set;
    set.features.resize(static_cast<Eigen::Index>(samples.size()), fm.channels);
    for (size_t i = 0; i < samples.size(); ++i)
        for (int c = 0; c < fm.channels; ++c)
            set.features(static_cast<Eigen::Index>(i), c) = samples[i][static_cast<size_t>(c)];
    set.pixels = std::move(pixels);
    return set;
}

namespace {

void check_forward_dims(const Eigen::VectorXd& lidar, const CameraFeatureSet& cams,
                        const AlignParams& params, const std::optional<DropoutMask>& mask) {
    params.validate();
    if (lidar.size() != params.d_lidar()) fail("align: lidar feature width mismatch");
    if (cams.size() > 0 && cams.features.cols() != params.d_camera())
        fail("align: camera feature width mismatch");
    if (mask && static_cast<int>(mask->keep.size()) != cams.size())
        fail("align: dropout mask length mismatch");
}

// Scalar loop on purpose: std::exp(-inf) is exactly 0, which the pre-softmax
// dropout path relies on, and the packet-math exp is not.
Eigen::VectorXd softmax(const Eigen::VectorXd& a) {
    const double peak = a.maxCoeff();
    Eigen::VectorXd w(a.size());
    double total = 0.0;
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        w[i] = std::exp(a[i] - peak);
        total += w[i];
    }
    return w / total;
}

// Shared tail of both alignment flavors: weight the values, run the MLP,
// concatenate with the lidar feature and squeeze.
AlignTrace attend_with_weights(const Eigen::VectorXd& lidar, const CameraFeatureSet& cams,
                               const AlignParams& params, const Eigen::VectorXd& weights,
                               const Eigen::VectorXd& applied) {
    AlignTrace trace;
    trace.weights = weights;
    trace.applied_weights = applied;

    const int n = cams.size();
    Eigen::VectorXd m = Eigen::VectorXd::Zero(params.d_mlp());
    trace.attended = Eigen::VectorXd::Zero(params.d_attn());
    trace.values.resize(n, params.d_attn());
    if (n > 0) {
        for (int i = 0; i < n; ++i) {
            const Eigen::VectorXd v = params.w_v * cams.features.row(i).transpose() + params.b_v;
            trace.values.row(i) = v.transpose();
            trace.attended += applied[i] * v;
        }
        m = params.w_mlp * trace.attended + params.b_mlp;
    }

    Eigen::VectorXd concat(params.d_lidar() + params.d_mlp());
    concat << lidar, m;
    trace.output = params.w_squeeze * concat + params.b_squeeze;
    return trace;
}

}  // namespace

AlignTrace learnable_align_trace(const Eigen::VectorXd& lidar_feature, const CameraFeatureSet& cams,
                                 const AlignParams& params,
                                 const std::optional<DropoutMask>& mask) {
    check_forward_dims(lidar_feature, cams, params, mask);

    const int n = cams.size();
    if (n == 0)
        return attend_with_weights(lidar_feature, cams, params, Eigen::VectorXd(0),
                                   Eigen::VectorXd(0));

    const double affinity_scale = params.scale_affinity ? 1.0 / std::sqrt(params.d_attn()) : 1.0;
    const Eigen::VectorXd q = params.w_q * lidar_feature + params.b_q;
    Eigen::VectorXd affinity(n);
    for (int i = 0; i < n; ++i) {
        const Eigen::VectorXd k = params.w_k * cams.features.row(i).transpose() + params.b_k;
        affinity[i] = affinity_scale * q.dot(k);
    }

    Eigen::VectorXd weights;
    Eigen::VectorXd applied;
    if (mask && params.dropout_pre_softmax) {
        weights = softmax(affinity);
        bool any = false;
        Eigen::VectorXd masked = affinity;
        for (int i = 0; i < n; ++i) {
            if (mask->keep[static_cast<size_t>(i)])
                any = true;
            else
                masked[i] = -std::numeric_limits<double>::infinity();
        }
        applied = any ? softmax(masked) : Eigen::VectorXd::Zero(n);
    } else {
        weights = softmax(affinity);
        applied = weights;
        if (mask) {
            for (int i = 0; i < n; ++i)
                applied[i] *= mask->keep[static_cast<size_t>(i)] ? mask->scale : 0.0;
        }
    }
    return attend_with_weights(lidar_feature, cams, params, weights, applied);
}

Eigen::VectorXd learnable_align(const Eigen::VectorXd& lidar_feature, const CameraFeatureSet& cams,
                                const AlignParams& params, const std::optional<DropoutMask>& mask) {
    return learnable_align_trace(lidar_feature, cams, params, mask).output;
}

Eigen::VectorXd mean_pool_align(const Eigen::VectorXd& lidar_feature, const CameraFeatureSet& cams,
                                const AlignParams& params) {
    check_forward_dims(lidar_feature, cams, params, std::nullopt);
    const int n = cams.size();
    const Eigen::VectorXd uniform =
        n > 0 ? Eigen::VectorXd::Constant(n, 1.0 / n) : Eigen::VectorXd(0);
    return attend_with_weights(lidar_feature, cams, params, uniform, uniform).output;
}

AlignGradients align_backward(const Eigen::VectorXd& lidar, const CameraFeatureSet& cams,
                              const AlignParams& params) {
    check_forward_dims(lidar, cams, params, std::nullopt);

    const int n = cams.size();
    const int dl = params.d_lidar();
    const int da = params.d_attn();
    const int dm = params.d_mlp();
    const double s = params.scale_affinity ? 1.0 / std::sqrt(da) : 1.0;

    // Forward intermediates, using the same expressions as the forward trace
    // so the stored activations agree bitwise.
    const Eigen::VectorXd q = params.w_q * lidar + params.b_q;
    Eigen::MatrixXd keys(n, da);
    Eigen::MatrixXd values(n, da);
    Eigen::VectorXd affinity(n);
    for (int i = 0; i < n; ++i) {
        const Eigen::VectorXd c = cams.features.row(i).transpose();
        const Eigen::VectorXd k = params.w_k * c + params.b_k;
        const Eigen::VectorXd v = params.w_v * c + params.b_v;
        keys.row(i) = k.transpose();
        values.row(i) = v.transpose();
        affinity[i] = s * q.dot(k);
    }
    Eigen::VectorXd w(0);
    if (n > 0) w = softmax(affinity);
    Eigen::VectorXd attended = Eigen::VectorXd::Zero(da);
    for (int i = 0; i < n; ++i) attended += w[i] * values.row(i).transpose();
    Eigen::VectorXd m = Eigen::VectorXd::Zero(dm);
    if (n > 0) m = params.w_mlp * attended + params.b_mlp;
    Eigen::VectorXd concat(dl + dm);
    concat << lidar, m;

    AlignGradients g;
    const Eigen::VectorXd g_out = Eigen::VectorXd::Ones(dl);  // d(sum)/d(output)

    // Squeeze layer.
    g.w_squeeze = g_out * concat.transpose();
    g.b_squeeze = g_out;
    const Eigen::VectorXd g_concat = params.w_squeeze.transpose() * g_out;
    g.lidar_feature = g_concat.head(dl);
    const Eigen::VectorXd g_m = g_concat.tail(dm);

    g.w_q = Eigen::MatrixXd::Zero(da, dl);
    g.b_q = Eigen::VectorXd::Zero(da);
    g.w_k = Eigen::MatrixXd::Zero(da, params.d_camera());
    g.b_k = Eigen::VectorXd::Zero(da);
    g.w_v = Eigen::MatrixXd::Zero(da, params.d_camera());
    g.b_v = Eigen::VectorXd::Zero(da);
    g.w_mlp = Eigen::MatrixXd::Zero(dm, da);
    g.b_mlp = Eigen::VectorXd::Zero(dm);
    g.camera_features = Eigen::MatrixXd::Zero(n, params.d_camera());
    if (n == 0) return g;  // the camera branch was the constant zero

    // MLP on the attended vector.
    g.w_mlp = g_m * attended.transpose();
    g.b_mlp = g_m;
    const Eigen::VectorXd g_attended = params.w_mlp.transpose() * g_m;

    // Weighted sum and softmax.
    Eigen::VectorXd g_w(n);
    for (int i = 0; i < n; ++i) g_w[i] = values.row(i).dot(g_attended);
    const double dot = w.dot(g_w);
    Eigen::VectorXd g_aff(n);
    for (int i = 0; i < n; ++i) g_aff[i] = w[i] * (g_w[i] - dot);

    // Affinities and embeddings.
    Eigen::VectorXd g_q = Eigen::VectorXd::Zero(da);
    for (int i = 0; i < n; ++i) {
        const Eigen::VectorXd c = cams.features.row(i).transpose();
        const Eigen::VectorXd g_k = s * g_aff[i] * q;
        const Eigen::VectorXd g_v = w[i] * g_attended;
        g_q += s * g_aff[i] * keys.row(i).transpose();
        g.w_k += g_k * c.transpose();
        g.b_k += g_k;
        g.w_v += g_v * c.transpose();
        g.b_v += g_v;
        g.camera_features.row(i) =
            (params.w_k.transpose() * g_k + params.w_v.transpose() * g_v).transpose();
    }
    g.w_q = g_q * lidar.transpose();
    g.b_q = g_q;
    g.lidar_feature += params.w_q.transpose() * g_q;
    return g;
}

double align_grad_check(const AlignParams& params, const Eigen::VectorXd& lidar_feature,
                        const CameraFeatureSet& cams, double eps) {
    if (!(eps >= 1e-7 && eps <= 1e-3)) fail("align_grad_check: eps outside [1e-7, 1e-3]");

    const AlignGradients analytic = align_backward(lidar_feature, cams, params);

    AlignParams p = params;
    Eigen::VectorXd l = lidar_feature;
    CameraFeatureSet c = cams;

    const auto loss = [&]() { return learnable_align(l, c, p).sum(); };

    double max_err = 0.0;
    const auto probe = [&](double* x, double g_analytic) {
        const double saved = *x;
        *x = saved + eps;
        const double up = loss();
        *x = saved - eps;
        const double down = loss();
        *x = saved;
        const double g_fd = (up - down) / (2.0 * eps);
        const double err = std::abs(g_analytic - g_fd) / std::max(1.0, std::abs(g_fd));
        max_err = std::max(max_err, err);
    };
    const auto probe_matrix = [&](Eigen::MatrixXd& x, const Eigen::MatrixXd& g) {
        for (Eigen::Index i = 0; i < x.size(); ++i) probe(x.data() + i, g.data()[i]);
    };
    const auto probe_vector = [&](Eigen::VectorXd& x, const Eigen::VectorXd& g) {
        for (Eigen::Index i = 0; i < x.size(); ++i) probe(x.data() + i, g.data()[i]);
    };

    probe_matrix(p.w_q, analytic.w_q);
    probe_vector(p.b_q, analytic.b_q);
    probe_matrix(p.w_k, analytic.w_k);
    probe_vector(p.b_k, analytic.b_k);
    probe_matrix(p.w_v, analytic.w_v);
    probe_vector(p.b_v, analytic.b_v);
    probe_matrix(p.w_mlp, analytic.w_mlp);
    probe_vector(p.b_mlp, analytic.b_mlp);
    probe_matrix(p.w_squeeze, analytic.w_squeeze);
    probe_vector(p.b_squeeze, analytic.b_squeeze);
    probe_vector(l, analytic.lidar_feature);
    probe_matrix(c.features, analytic.camera_features);
    return max_err;
}

// --- serialization ----------------------------------------------------------

namespace {

json matrix_to_json(const Eigen::MatrixXd& m) {
    std::vector<double> flat;
    flat.reserve(static_cast<size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) flat.push_back(m(r, c));
    return json(flat);
}

Eigen::MatrixXd matrix_from_json(const json& j, int rows, int cols, const char* name) {
    const auto flat = j.get<std::vector<double>>();
    if (static_cast<int>(flat.size()) != rows * cols)
        fail(std::string("align params json: bad element count for ") + name);
    Eigen::MatrixXd m(rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) m(r, c) = flat[static_cast<size_t>(r) * cols + c];
    return m;
}

}  // namespace

std::string align_params_to_json_text(const AlignParams& p) {
    json j;
    j["d_lidar"] = p.d_lidar();
    j["d_camera"] = p.d_camera();
    j["d_attn"] = p.d_attn();
    j["d_mlp"] = p.d_mlp();
    j["dropout_rate"] = p.dropout_rate;
    j["scale_affinity"] = p.scale_affinity;
    j["dropout_pre_softmax"] = p.dropout_pre_softmax;
    j["w_q"] = matrix_to_json(p.w_q);
    j["b_q"] = matrix_to_json(p.b_q);
    j["w_k"] = matrix_to_json(p.w_k);
    j["b_k"] = matrix_to_json(p.b_k);
    j["w_v"] = matrix_to_json(p.w_v);
    j["b_v"] = matrix_to_json(p.b_v);
    j["w_mlp"] = matrix_to_json(p.w_mlp);
    j["b_mlp"] = matrix_to_json(p.b_mlp);
    j["w_squeeze"] = matrix_to_json(p.w_squeeze);
    j["b_squeeze"] = matrix_to_json(p.b_squeeze);
    return j.dump() + "\n";
}

AlignParams align_params_from_json_text(const std::string& text) {
    const json j = json::parse(text);
    const int dl = j.at("d_lidar").get<int>();
    const int dc = j.at("d_camera").get<int>();
    const int da = j.at("d_attn").get<int>();
    const int dm = j.at("d_mlp").get<int>();
    AlignParams p;
    p.dropout_rate = j.value("dropout_rate", 0.3);
    p.scale_affinity = j.value("scale_affinity", false);
    p.dropout_pre_softmax = j.value("dropout_pre_softmax", false);
    p.w_q = matrix_from_json(j.at("w_q"), da, dl, "w_q");
    p.b_q = matrix_from_json(j.at("b_q"), da, 1, "b_q");
    p.w_k = matrix_from_json(j.at("w_k"), da, dc, "w_k");
    p.b_k = matrix_from_json(j.at("b_k"), da, 1, "b_k");
    p.w_v = matrix_from_json(j.at("w_v"), da, dc, "w_v");
    p.b_v = matrix_from_json(j.at("b_v"), da, 1, "b_v");
    p.w_mlp = matrix_from_json(j.at("w_mlp"), dm, da, "w_mlp");
    p.b_mlp = matrix_from_json(j.at("b_mlp"), dm, 1, "b_mlp");
    p.w_squeeze = matrix_from_json(j.at("w_squeeze"), dl, dl + dm, "w_squeeze");
    p.b_squeeze = matrix_from_json(j.at("b_squeeze"), dl, 1, "b_squeeze");
    p.validate();
    return p;
}

}  // namespace fusionkit::align
