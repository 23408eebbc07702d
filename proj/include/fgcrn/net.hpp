#pragma once

// Feature extractor and classifier with hand-written reverse-mode gradients.
//
//   x (B,V,T) -> multiscale depthwise conv, kernels 3/5/7/9, each followed by
//                batch norm or self-adaptive instance norm -> ReLU concat (B,4V,T)
//             -> bidirectional GRU, outputs concatenated along time (B,2T,H)
//             -> temporal attention pooling (B,H)
//             -> linear classifier (B,k) + softmax
//
// The network is fixed; there is no general graph. forward() records a Trace,
// backward() consumes it and accumulates into Param::grad.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fgcrn/data.hpp"
#include "fgcrn/error.hpp"
#include "fgcrn/random.hpp"

namespace fgcrn::net {

struct Param {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;

    Param() = default;
    Param(std::string n, std::vector<std::size_t> s) : name(std::move(n)), shape(std::move(s)) {
        std::size_t count = 1;
        for (auto d : shape) count *= d;
        value.assign(count, 0.0);
        grad.assign(count, 0.0);
    }
    std::size_t size() const { return value.size(); }
    double* data() { return value.data(); }
    const double* data() const { return value.data(); }
};

enum class NormKind { BatchNorm, Sain };

// Which normalizer each conv branch uses. `Both` is BN on kernels 3 and 5,
// SAIN on kernels 7 and 9.
enum class NormMode { Both, BatchNormOnly, SainOnly };

inline std::string to_string(NormMode m) {
    switch (m) {
        case NormMode::Both: return "both";
        case NormMode::BatchNormOnly: return "bn";
        case NormMode::SainOnly: return "sain";
    }
    return "both";
}

inline NormMode parse_norm_mode(const std::string& s) {
    if (s == "both") return NormMode::Both;
    if (s == "bn") return NormMode::BatchNormOnly;
    if (s == "sain") return NormMode::SainOnly;
    throw ConfigError("norm must be one of both|bn|sain, got '" + s + "'");
}

struct ModelConfig {
    std::size_t num_vars = 7;
    std::size_t window = 20;
    std::size_t hidden = 100;
    std::size_t num_classes = 2;
    NormMode norm = NormMode::Both;
    bool bidirectional = true;
    bool use_tam = true;
    std::size_t sain_hidden = 0;  // 0: same as num_vars
    std::size_t tam_reduction = 4;
    std::size_t tam_kernel = 3;
    double eps = 1e-5;
    double bn_momentum = 0.1;

    static constexpr std::array<std::size_t, 4> kKernelSizes = {3, 5, 7, 9};

    std::size_t branch_channels() const { return 4 * num_vars; }
    std::size_t seq_positions() const { return bidirectional ? 2 * window : window; }
    std::size_t tam_bottleneck() const { return std::max<std::size_t>(1, seq_positions() / tam_reduction); }
    std::size_t sain_width() const { return sain_hidden ? sain_hidden : num_vars; }

    NormKind branch_norm(std::size_t branch) const {
        switch (norm) {
            case NormMode::BatchNormOnly: return NormKind::BatchNorm;
            case NormMode::SainOnly: return NormKind::Sain;
            case NormMode::Both: break;
        }
        return branch < 2 ? NormKind::BatchNorm : NormKind::Sain;
    }

    void validate() const {
        if (num_vars < 1 || window < 1 || hidden < 1 || num_classes < 1)
            throw ConfigError("model: dimensions must be positive");
        if (tam_kernel % 2 == 0) throw ConfigError("model: attention merge kernel must be odd");
        if (tam_reduction < 1) throw ConfigError("model: attention reduction must be >= 1");
        for (std::size_t b = 0; b < 4; ++b)
            if (branch_norm(b) == NormKind::Sain && window < 2)
                throw ConfigError("model: instance normalization needs window >= 2");
    }

    std::string describe() const {
        std::ostringstream os;
        os << "V=" << num_vars << ";T=" << window << ";H=" << hidden << ";k=" << num_classes
           << ";norm=" << to_string(norm) << ";bi=" << bidirectional << ";tam=" << use_tam
           << ";sain_hidden=" << sain_width() << ";tam_reduction=" << tam_reduction << ";tam_kernel=" << tam_kernel
           << ";eps=" << eps << ";bn_momentum=" << bn_momentum;
        return os.str();
    }
};

// y = W x + b, W stored out x in row-major.
struct Dense {
    std::size_t in = 0, out = 0;
    Param weight, bias;

    Dense() = default;
    Dense(const std::string& name, std::size_t in_dim, std::size_t out_dim)
        : in(in_dim), out(out_dim), weight(name + ".weight", {out_dim, in_dim}), bias(name + ".bias", {out_dim}) {}

    void init_uniform(Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        for (auto& w : weight.value) w = uniform(rng, -bound, bound);
        for (auto& b : bias.value) b = uniform(rng, -bound, bound);
    }

    void forward(const double* x, double* y) const {
        const double* w = weight.data();
        for (std::size_t o = 0; o < out; ++o) {
            double acc = bias.value[o];
            const double* row = w + o * in;
            for (std::size_t i = 0; i < in; ++i) acc += row[i] * x[i];
            y[o] = acc;
        }
    }

    // Accumulates parameter grads; adds input grad into dx when non-null.
    void backward(const double* x, const double* dy, double* dx) {
        double* gw = weight.grad.data();
        const double* w = weight.data();
        for (std::size_t o = 0; o < out; ++o) {
            const double g = dy[o];
            if (g == 0.0) continue;
            bias.grad[o] += g;
            double* grow = gw + o * in;
            for (std::size_t i = 0; i < in; ++i) grow[i] += g * x[i];
            if (dx) {
                const double* row = w + o * in;
                for (std::size_t i = 0; i < in; ++i) dx[i] += g * row[i];
            }
        }
    }
};

struct ConvBranch {
    std::size_t kernel = 3;
    NormKind norm = NormKind::BatchNorm;
    Param weight;  // V x kernel
    // batch norm
    Param gamma, beta;
    std::vector<double> running_mean, running_var;
    // self-adaptive instance norm: gamma = g2(relu(g1(mu))), beta = g4(relu(g3(sigma)))
    Dense g1, g2, g3, g4;
};

struct GruDirection {
    Param w_r, w_z, w_n;  // H x D
    Param u_r, u_z, u_n;  // H x H
    Param b_r, b_z, b_n;  // H
};

struct Attention {
    Dense g5, g6, g7, g8;
    Param merge_weight;  // 2 x kernel
    Param merge_bias;    // 1
};

inline Eigen::MatrixXd random_orthogonal(std::size_t n, Rng& rng) {
    Eigen::MatrixXd a(n, n);
    for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j) a(i, j) = normal01(rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    Eigen::MatrixXd q = qr.householderQ();
    const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (Eigen::Index j = 0; j < q.cols(); ++j)
        if (r(j, j) < 0) q.col(j) = -q.col(j);
    return q;
}

class Model {
public:
    ModelConfig cfg;
    std::array<ConvBranch, 4> branches;
    GruDirection forward_gru, backward_gru;
    Attention tam;
    Dense classifier;
    // Bumped by every optimizer step; traces from older versions are stale.
    std::uint64_t version = 0;

    static Model create(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        Model m;
        m.cfg = cfg;
        Rng rng(seed);
        const std::size_t V = cfg.num_vars, H = cfg.hidden, D = cfg.branch_channels();
        for (std::size_t b = 0; b < 4; ++b) {
            auto& br = m.branches[b];
            br.kernel = ModelConfig::kKernelSizes[b];
            br.norm = cfg.branch_norm(b);
            const std::string prefix = "msdc" + std::to_string(br.kernel);
            br.weight = Param(prefix + ".kernel", {V, br.kernel});
            const double bound = 1.0 / std::sqrt(static_cast<double>(br.kernel));
            for (auto& w : br.weight.value) w = uniform(rng, -bound, bound);
            if (br.norm == NormKind::BatchNorm) {
                br.gamma = Param(prefix + ".bn.gamma", {V});
                br.beta = Param(prefix + ".bn.beta", {V});
                std::fill(br.gamma.value.begin(), br.gamma.value.end(), 1.0);
                br.running_mean.assign(V, 0.0);
                br.running_var.assign(V, 1.0);
            } else {
                const std::size_t S = cfg.sain_width();
                br.g1 = Dense(prefix + ".sain.g1", V, S);
                br.g2 = Dense(prefix + ".sain.g2", S, V);
                br.g3 = Dense(prefix + ".sain.g3", V, S);
                br.g4 = Dense(prefix + ".sain.g4", S, V);
                for (Dense* d : {&br.g1, &br.g2, &br.g3, &br.g4}) d->init_uniform(rng);
                // generated scale starts around one
                std::fill(br.g2.bias.value.begin(), br.g2.bias.value.end(), 1.0);
                std::fill(br.g4.bias.value.begin(), br.g4.bias.value.end(), 0.0);
            }
        }
        auto init_gru = [&](GruDirection& g, const std::string& prefix) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(D));
            for (auto [p, n] : {std::pair{&g.w_r, "w_r"}, {&g.w_z, "w_z"}, {&g.w_n, "w_n"}}) {
                *p = Param(prefix + "." + n, {H, D});
                for (auto& w : p->value) w = uniform(rng, -bound, bound);
            }
            for (auto [p, n] : {std::pair{&g.u_r, "u_r"}, {&g.u_z, "u_z"}, {&g.u_n, "u_n"}}) {
                *p = Param(prefix + "." + n, {H, H});
                const Eigen::MatrixXd q = random_orthogonal(H, rng);
                for (std::size_t i = 0; i < H; ++i)
                    for (std::size_t j = 0; j < H; ++j)
                        p->value[i * H + j] = q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
            }
            for (auto [p, n] : {std::pair{&g.b_r, "b_r"}, {&g.b_z, "b_z"}, {&g.b_n, "b_n"}})
                *p = Param(prefix + "." + n, {H});
        };
        init_gru(m.forward_gru, "gru.fwd");
        if (cfg.bidirectional) init_gru(m.backward_gru, "gru.bwd");
        if (cfg.use_tam) {
            const std::size_t P = cfg.seq_positions(), Pb = cfg.tam_bottleneck();
            m.tam.g5 = Dense("tam.g5", P, Pb);
            m.tam.g6 = Dense("tam.g6", Pb, P);
            m.tam.g7 = Dense("tam.g7", P, Pb);
            m.tam.g8 = Dense("tam.g8", Pb, P);
            for (Dense* d : {&m.tam.g5, &m.tam.g6, &m.tam.g7, &m.tam.g8}) d->init_uniform(rng);
            m.tam.merge_weight = Param("tam.merge.weight", {2, cfg.tam_kernel});
            const double bound = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.tam_kernel));
            for (auto& w : m.tam.merge_weight.value) w = uniform(rng, -bound, bound);
            m.tam.merge_bias = Param("tam.merge.bias", {1});
            // attention starts open on every step
            m.tam.merge_bias.value[0] = 1.0;
        }
        m.classifier = Dense("classifier", H, cfg.num_classes);
        m.classifier.init_uniform(rng);
        return m;
    }

    // Trainable tensors in a fixed order.
    std::vector<Param*> parameters() {
        std::vector<Param*> ps;
        for (auto& br : branches) {
            ps.push_back(&br.weight);
            if (br.norm == NormKind::BatchNorm) {
                ps.push_back(&br.gamma);
                ps.push_back(&br.beta);
            } else {
                for (Dense* d : {&br.g1, &br.g2, &br.g3, &br.g4}) {
                    ps.push_back(&d->weight);
                    ps.push_back(&d->bias);
                }
            }
        }
        auto add_gru = [&](GruDirection& g) {
            for (Param* p : {&g.w_r, &g.w_z, &g.w_n, &g.u_r, &g.u_z, &g.u_n, &g.b_r, &g.b_z, &g.b_n})
                ps.push_back(p);
        };
        add_gru(forward_gru);
        if (cfg.bidirectional) add_gru(backward_gru);
        if (cfg.use_tam) {
            for (Dense* d : {&tam.g5, &tam.g6, &tam.g7, &tam.g8}) {
                ps.push_back(&d->weight);
                ps.push_back(&d->bias);
            }
            ps.push_back(&tam.merge_weight);
            ps.push_back(&tam.merge_bias);
        }
        ps.push_back(&classifier.weight);
        ps.push_back(&classifier.bias);
        return ps;
    }

    std::vector<const Param*> parameters() const {
        auto ps = const_cast<Model*>(this)->parameters();
        return {ps.begin(), ps.end()};
    }

    void zero_grad() {
        for (Param* p : parameters()) std::fill(p->grad.begin(), p->grad.end(), 0.0);
    }
};

struct BranchTrace {
    std::vector<double> conv;  // B x V x T
    std::vector<double> xhat;  // B x V x T
    std::vector<double> mean, inv_std;      // batch norm: V (batch statistics or running)
    std::vector<double> batch_var;          // batch norm, training only: V
    std::vector<double> inst_mean, inst_std;  // SAIN: B x V, inst_std = sqrt(var + eps)
    std::vector<double> g1_pre, g3_pre;       // SAIN: B x S
    std::vector<double> gen_gamma, gen_beta;  // SAIN: B x V
};

struct GruTrace {
    // indexed [b][step][h] in processing order
    std::vector<double> r, z, n, h_prev, h;
};

struct Trace {
    std::size_t batch = 0;
    bool training = false;
    std::uint64_t version = 0;
    std::vector<double> input;  // B x V x T
    std::array<BranchTrace, 4> branches;
    std::vector<double> pre_concat;  // B x 4V x T
    std::vector<double> seq;         // B x T x 4V, after ReLU
    GruTrace fwd, bwd;
    std::vector<double> hseq;  // B x P x H
    std::vector<double> avg, stdv;         // B x P
    std::vector<double> g5_pre, g7_pre;    // B x Pb
    std::vector<double> a1, a2;            // B x P
    std::vector<double> merge_pre, attn;   // B x P
    std::vector<double> features;  // B x H
    std::vector<double> logits;    // B x k
    std::vector<double> probs;     // B x k
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Packs windows into a B x V x T buffer.
inline std::vector<double> pack_batch(const std::vector<Window>& windows, std::span<const std::size_t> idx) {
    if (idx.empty()) return {};
    const std::size_t per = windows[idx[0]].x.size();
    std::vector<double> out(idx.size() * per);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const auto& w = windows[idx[i]];
        if (w.x.size() != per) throw ShapeError("pack_batch: windows have different shapes");
        std::copy(w.x.begin(), w.x.end(), out.begin() + static_cast<std::ptrdiff_t>(i * per));
    }
    return out;
}

// Same-padded depthwise cross-correlation: y[t] = sum_k w[k] x[t + k - half].
inline void depthwise_conv1d(std::span<const double> x, std::size_t batch, std::size_t channels, std::size_t length,
                             std::span<const double> kernel, std::size_t ksize, std::span<double> y) {
    if (ksize % 2 == 0) throw ConfigError("depthwise_conv1d: kernel size must be odd, got " + std::to_string(ksize));
    if (x.size() != batch * channels * length || y.size() != x.size() || kernel.size() != channels * ksize)
        throw ShapeError("depthwise_conv1d: shape mismatch");
    const auto half = static_cast<std::ptrdiff_t>(ksize / 2);
    const auto T = static_cast<std::ptrdiff_t>(length);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < channels; ++c) {
            const double* xs = x.data() + (b * channels + c) * length;
            const double* w = kernel.data() + c * ksize;
            double* ys = y.data() + (b * channels + c) * length;
            for (std::ptrdiff_t t = 0; t < T; ++t) {
                double acc = 0.0;
                for (std::ptrdiff_t k = 0; k < static_cast<std::ptrdiff_t>(ksize); ++k) {
                    const std::ptrdiff_t src = t + k - half;
                    if (src >= 0 && src < T) acc += w[k] * xs[src];
                }
                ys[t] = acc;
            }
        }
}

namespace detail {

inline void norm_forward(const ModelConfig& cfg, const ConvBranch& br, std::size_t B, bool training,
                         BranchTrace& tr, std::span<double> out) {
    const std::size_t V = cfg.num_vars, T = cfg.window;
    tr.xhat.resize(B * V * T);
    if (br.norm == NormKind::BatchNorm) {
        if (training && B < 2) throw DataError("batch norm needs at least 2 samples per batch in training mode");
        tr.mean.assign(V, 0.0);
        tr.inv_std.assign(V, 0.0);
        tr.batch_var.assign(V, 0.0);
        const double n = static_cast<double>(B * T);
        for (std::size_t v = 0; v < V; ++v) {
            double mean, var;
            if (training) {
                double s = 0.0;
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t t = 0; t < T; ++t) s += tr.conv[(b * V + v) * T + t];
                mean = s / n;
                double ss = 0.0;
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t t = 0; t < T; ++t) {
                        const double d = tr.conv[(b * V + v) * T + t] - mean;
                        ss += d * d;
                    }
                var = ss / n;
                tr.batch_var[v] = var;
            } else {
                mean = br.running_mean[v];
                var = br.running_var[v];
            }
            tr.mean[v] = mean;
            tr.inv_std[v] = 1.0 / std::sqrt(var + cfg.eps);
            const double g = br.gamma.value[v], be = br.beta.value[v];
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t t = 0; t < T; ++t) {
                    const std::size_t i = (b * V + v) * T + t;
                    tr.xhat[i] = (tr.conv[i] - mean) * tr.inv_std[v];
                    out[i] = g * tr.xhat[i] + be;
                }
        }
        return;
    }
    if (T < 2) throw DataError("instance normalization needs at least 2 time steps");
    const std::size_t S = cfg.sain_width();
    tr.inst_mean.assign(B * V, 0.0);
    tr.inst_std.assign(B * V, 0.0);
    tr.g1_pre.assign(B * S, 0.0);
    tr.g3_pre.assign(B * S, 0.0);
    tr.gen_gamma.assign(B * V, 0.0);
    tr.gen_beta.assign(B * V, 0.0);
    std::vector<double> hidden(S);
    const double n = static_cast<double>(T);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t v = 0; v < V; ++v) {
            const double* c = tr.conv.data() + (b * V + v) * T;
            double s = 0.0;
            for (std::size_t t = 0; t < T; ++t) s += c[t];
            const double mean = s / n;
            double ss = 0.0;
            for (std::size_t t = 0; t < T; ++t) ss += (c[t] - mean) * (c[t] - mean);
            tr.inst_mean[b * V + v] = mean;
            tr.inst_std[b * V + v] = std::sqrt(ss / n + cfg.eps);
        }
        br.g1.forward(&tr.inst_mean[b * V], &tr.g1_pre[b * S]);
        for (std::size_t i = 0; i < S; ++i) hidden[i] = std::max(0.0, tr.g1_pre[b * S + i]);
        br.g2.forward(hidden.data(), &tr.gen_gamma[b * V]);
        br.g3.forward(&tr.inst_std[b * V], &tr.g3_pre[b * S]);
        for (std::size_t i = 0; i < S; ++i) hidden[i] = std::max(0.0, tr.g3_pre[b * S + i]);
        br.g4.forward(hidden.data(), &tr.gen_beta[b * V]);
        for (std::size_t v = 0; v < V; ++v) {
            const double mean = tr.inst_mean[b * V + v], sd = tr.inst_std[b * V + v];
            const double g = tr.gen_gamma[b * V + v], be = tr.gen_beta[b * V + v];
            for (std::size_t t = 0; t < T; ++t) {
                const std::size_t i = (b * V + v) * T + t;
                tr.xhat[i] = (tr.conv[i] - mean) / sd;
                out[i] = g * tr.xhat[i] + be;
            }
        }
    }
}

// dy: B x V x T upstream grad of the normalized output; writes dconv.
inline void norm_backward(const ModelConfig& cfg, ConvBranch& br, std::size_t B, bool training,
                          const BranchTrace& tr, std::span<const double> dy, std::span<double> dconv) {
    const std::size_t V = cfg.num_vars, T = cfg.window;
    if (br.norm == NormKind::BatchNorm) {
        const double n = static_cast<double>(B * T);
        for (std::size_t v = 0; v < V; ++v) {
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t t = 0; t < T; ++t) {
                    const std::size_t i = (b * V + v) * T + t;
                    sum_dy += dy[i];
                    sum_dy_xhat += dy[i] * tr.xhat[i];
                }
            br.gamma.grad[v] += sum_dy_xhat;
            br.beta.grad[v] += sum_dy;
            const double g = br.gamma.value[v], is = tr.inv_std[v];
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t t = 0; t < T; ++t) {
                    const std::size_t i = (b * V + v) * T + t;
                    if (training)
                        dconv[i] = g * is * (dy[i] - sum_dy / n - tr.xhat[i] * sum_dy_xhat / n);
                    else
                        dconv[i] = g * is * dy[i];
                }
        }
        return;
    }
    const std::size_t S = cfg.sain_width();
    const double n = static_cast<double>(T);
    std::vector<double> dgamma(V), dbeta(V), dmean(V), dstd(V), hidden(S), dhidden(S);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t v = 0; v < V; ++v) {
            double sg = 0.0, sb = 0.0;
            for (std::size_t t = 0; t < T; ++t) {
                const std::size_t i = (b * V + v) * T + t;
                sg += dy[i] * tr.xhat[i];
                sb += dy[i];
            }
            dgamma[v] = sg;
            dbeta[v] = sb;
        }
        // gamma path: g2(relu(g1(mean)))
        std::fill(dmean.begin(), dmean.end(), 0.0);
        std::fill(dhidden.begin(), dhidden.end(), 0.0);
        for (std::size_t i = 0; i < S; ++i) hidden[i] = std::max(0.0, tr.g1_pre[b * S + i]);
        br.g2.backward(hidden.data(), dgamma.data(), dhidden.data());
        for (std::size_t i = 0; i < S; ++i)
            if (tr.g1_pre[b * S + i] <= 0) dhidden[i] = 0.0;
        br.g1.backward(&tr.inst_mean[b * V], dhidden.data(), dmean.data());
        // beta path: g4(relu(g3(std)))
        std::fill(dstd.begin(), dstd.end(), 0.0);
        std::fill(dhidden.begin(), dhidden.end(), 0.0);
        for (std::size_t i = 0; i < S; ++i) hidden[i] = std::max(0.0, tr.g3_pre[b * S + i]);
        br.g4.backward(hidden.data(), dbeta.data(), dhidden.data());
        for (std::size_t i = 0; i < S; ++i)
            if (tr.g3_pre[b * S + i] <= 0) dhidden[i] = 0.0;
        br.g3.backward(&tr.inst_std[b * V], dhidden.data(), dstd.data());

        for (std::size_t v = 0; v < V; ++v) {
            const double g = tr.gen_gamma[b * V + v], sd = tr.inst_std[b * V + v];
            double sum_dx = 0.0, sum_dx_xhat = 0.0;
            for (std::size_t t = 0; t < T; ++t) {
                const std::size_t i = (b * V + v) * T + t;
                const double dxh = dy[i] * g;
                sum_dx += dxh;
                sum_dx_xhat += dxh * tr.xhat[i];
            }
            for (std::size_t t = 0; t < T; ++t) {
                const std::size_t i = (b * V + v) * T + t;
                const double dxh = dy[i] * g;
                dconv[i] = (dxh - sum_dx / n - tr.xhat[i] * sum_dx_xhat / n) / sd + dmean[v] / n +
                           dstd[v] * tr.xhat[i] / n;
            }
        }
    }
}

inline void gru_forward(const ModelConfig& cfg, const GruDirection& g, bool reverse, std::size_t B,
                        const std::vector<double>& seq, GruTrace& tr, std::vector<double>& hseq,
                        std::size_t pos_offset) {
    const std::size_t T = cfg.window, D = cfg.branch_channels(), H = cfg.hidden, P = cfg.seq_positions();
    for (auto* v : {&tr.r, &tr.z, &tr.n, &tr.h_prev, &tr.h}) v->assign(B * T * H, 0.0);
    std::vector<double> rh(H);
    for (std::size_t b = 0; b < B; ++b) {
        std::vector<double> prev(H, 0.0);
        for (std::size_t s = 0; s < T; ++s) {
            const std::size_t t = reverse ? T - 1 - s : s;
            const double* f = seq.data() + (b * T + t) * D;
            const std::size_t base = (b * T + s) * H;
            double* r = &tr.r[base];
            double* z = &tr.z[base];
            double* nn = &tr.n[base];
            std::copy(prev.begin(), prev.end(), tr.h_prev.begin() + static_cast<std::ptrdiff_t>(base));
            for (std::size_t h = 0; h < H; ++h) {
                const double* wr = g.w_r.data() + h * D;
                const double* wz = g.w_z.data() + h * D;
                const double* ur = g.u_r.data() + h * H;
                const double* uz = g.u_z.data() + h * H;
                double ar = g.b_r.value[h], az = g.b_z.value[h];
                for (std::size_t d = 0; d < D; ++d) {
                    ar += wr[d] * f[d];
                    az += wz[d] * f[d];
                }
                for (std::size_t j = 0; j < H; ++j) {
                    ar += ur[j] * prev[j];
                    az += uz[j] * prev[j];
                }
                r[h] = sigmoid(ar);
                z[h] = sigmoid(az);
            }
            for (std::size_t j = 0; j < H; ++j) rh[j] = r[j] * prev[j];
            for (std::size_t h = 0; h < H; ++h) {
                const double* wn = g.w_n.data() + h * D;
                const double* un = g.u_n.data() + h * H;
                double an = g.b_n.value[h];
                for (std::size_t d = 0; d < D; ++d) an += wn[d] * f[d];
                for (std::size_t j = 0; j < H; ++j) an += un[j] * rh[j];
                nn[h] = std::tanh(an);
            }
            double* out = &tr.h[base];
            for (std::size_t h = 0; h < H; ++h) out[h] = (1.0 - z[h]) * prev[h] + z[h] * nn[h];
            std::copy(out, out + H, prev.begin());
            std::copy(out, out + H, hseq.begin() + static_cast<std::ptrdiff_t>((b * P + pos_offset + t) * H));
        }
    }
}

inline void gru_backward(const ModelConfig& cfg, GruDirection& g, bool reverse, std::size_t B,
                         const std::vector<double>& seq, const GruTrace& tr, const std::vector<double>& dhseq,
                         std::size_t pos_offset, std::vector<double>& dseq) {
    const std::size_t T = cfg.window, D = cfg.branch_channels(), H = cfg.hidden, P = cfg.seq_positions();
    std::vector<double> dh(H), dh_prev(H), dar(H), daz(H), dan(H), drh(H), rh(H);
    for (std::size_t b = 0; b < B; ++b) {
        std::fill(dh_prev.begin(), dh_prev.end(), 0.0);
        for (std::size_t s = T; s-- > 0;) {
            const std::size_t t = reverse ? T - 1 - s : s;
            const double* f = seq.data() + (b * T + t) * D;
            double* df = dseq.data() + (b * T + t) * D;
            const std::size_t base = (b * T + s) * H;
            const double* r = &tr.r[base];
            const double* z = &tr.z[base];
            const double* nn = &tr.n[base];
            const double* hp = &tr.h_prev[base];
            const double* up = &dhseq[(b * P + pos_offset + t) * H];
            for (std::size_t h = 0; h < H; ++h) dh[h] = up[h] + dh_prev[h];
            for (std::size_t h = 0; h < H; ++h) {
                const double dn = dh[h] * z[h];
                const double dz = dh[h] * (nn[h] - hp[h]);
                dan[h] = dn * (1.0 - nn[h] * nn[h]);
                daz[h] = dz * z[h] * (1.0 - z[h]);
                dh_prev[h] = dh[h] * (1.0 - z[h]);
                rh[h] = r[h] * hp[h];
            }
            // candidate: an = Wn f + Un (r*hp) + bn
            std::fill(drh.begin(), drh.end(), 0.0);
            for (std::size_t h = 0; h < H; ++h) {
                const double a = dan[h];
                if (a == 0.0) continue;
                g.b_n.grad[h] += a;
                double* gwn = g.w_n.grad.data() + h * D;
                const double* wn = g.w_n.data() + h * D;
                for (std::size_t d = 0; d < D; ++d) {
                    gwn[d] += a * f[d];
                    df[d] += a * wn[d];
                }
                double* gun = g.u_n.grad.data() + h * H;
                const double* un = g.u_n.data() + h * H;
                for (std::size_t j = 0; j < H; ++j) {
                    gun[j] += a * rh[j];
                    drh[j] += a * un[j];
                }
            }
            for (std::size_t j = 0; j < H; ++j) {
                dar[j] = drh[j] * hp[j] * r[j] * (1.0 - r[j]);
                dh_prev[j] += drh[j] * r[j];
            }
            // gates: ar = Wr f + Ur hp + br, az = Wz f + Uz hp + bz
            for (std::size_t h = 0; h < H; ++h) {
                const double ar = dar[h], az = daz[h];
                g.b_r.grad[h] += ar;
                g.b_z.grad[h] += az;
                double* gwr = g.w_r.grad.data() + h * D;
                double* gwz = g.w_z.grad.data() + h * D;
                const double* wr = g.w_r.data() + h * D;
                const double* wz = g.w_z.data() + h * D;
                for (std::size_t d = 0; d < D; ++d) {
                    gwr[d] += ar * f[d];
                    gwz[d] += az * f[d];
                    df[d] += ar * wr[d] + az * wz[d];
                }
                double* gur = g.u_r.grad.data() + h * H;
                double* guz = g.u_z.grad.data() + h * H;
                const double* ur = g.u_r.data() + h * H;
                const double* uz = g.u_z.data() + h * H;
                for (std::size_t j = 0; j < H; ++j) {
                    gur[j] += ar * hp[j];
                    guz[j] += az * hp[j];
                    dh_prev[j] += ar * ur[j] + az * uz[j];
                }
            }
        }
    }
}

}  // namespace detail

// Runs the network on a packed B x V x T batch. In training mode batch norm
// uses batch statistics; running statistics are not touched here (see
// commit_batch_stats).
inline Trace forward(const Model& m, std::span<const double> input, std::size_t batch, bool training) {
    const ModelConfig& cfg = m.cfg;
    const std::size_t V = cfg.num_vars, T = cfg.window, H = cfg.hidden, C = cfg.branch_channels();
    const std::size_t P = cfg.seq_positions(), K = cfg.num_classes;
    if (batch == 0) throw DataError("forward: empty batch");
    if (input.size() != batch * V * T)
        throw ShapeError("forward: input has " + std::to_string(input.size()) + " values, expected B*V*T = " +
                         std::to_string(batch * V * T));
    Trace tr;
    tr.batch = batch;
    tr.training = training;
    tr.version = m.version;
    tr.input.assign(input.begin(), input.end());

    // multiscale depthwise conv + normalization, concatenated along channels
    tr.pre_concat.assign(batch * C * T, 0.0);
    std::vector<double> normed(batch * V * T);
    for (std::size_t i = 0; i < 4; ++i) {
        const auto& br = m.branches[i];
        auto& bt = tr.branches[i];
        bt.conv.resize(batch * V * T);
        depthwise_conv1d(tr.input, batch, V, T, br.weight.value, br.kernel, bt.conv);
        detail::norm_forward(cfg, br, batch, training, bt, normed);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t v = 0; v < V; ++v)
                std::copy_n(normed.begin() + static_cast<std::ptrdiff_t>((b * V + v) * T), T,
                            tr.pre_concat.begin() + static_cast<std::ptrdiff_t>((b * C + i * V + v) * T));
    }
    tr.seq.assign(batch * T * C, 0.0);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t t = 0; t < T; ++t)
                tr.seq[(b * T + t) * C + c] = std::max(0.0, tr.pre_concat[(b * C + c) * T + t]);

    // recurrent encoder
    tr.hseq.assign(batch * P * H, 0.0);
    detail::gru_forward(cfg, m.forward_gru, false, batch, tr.seq, tr.fwd, tr.hseq, 0);
    if (cfg.bidirectional) detail::gru_forward(cfg, m.backward_gru, true, batch, tr.seq, tr.bwd, tr.hseq, T);

    // temporal attention pooling
    tr.features.assign(batch * H, 0.0);
    if (cfg.use_tam) {
        const std::size_t Pb = cfg.tam_bottleneck(), Km = cfg.tam_kernel;
        const auto half = static_cast<std::ptrdiff_t>(Km / 2);
        tr.avg.assign(batch * P, 0.0);
        tr.stdv.assign(batch * P, 0.0);
        tr.g5_pre.assign(batch * Pb, 0.0);
        tr.g7_pre.assign(batch * Pb, 0.0);
        tr.a1.assign(batch * P, 0.0);
        tr.a2.assign(batch * P, 0.0);
        tr.merge_pre.assign(batch * P, 0.0);
        tr.attn.assign(batch * P, 0.0);
        std::vector<double> hidden(Pb);
        const double* mw = m.tam.merge_weight.data();
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t p = 0; p < P; ++p) {
                const double* hp = &tr.hseq[(b * P + p) * H];
                double s = 0.0;
                for (std::size_t h = 0; h < H; ++h) s += hp[h];
                const double mean = s / static_cast<double>(H);
                double ss = 0.0;
                for (std::size_t h = 0; h < H; ++h) ss += (hp[h] - mean) * (hp[h] - mean);
                tr.avg[b * P + p] = mean;
                tr.stdv[b * P + p] = std::sqrt(ss / static_cast<double>(H) + cfg.eps);
            }
            m.tam.g5.forward(&tr.avg[b * P], &tr.g5_pre[b * Pb]);
            for (std::size_t i = 0; i < Pb; ++i) hidden[i] = std::max(0.0, tr.g5_pre[b * Pb + i]);
            m.tam.g6.forward(hidden.data(), &tr.a1[b * P]);
            m.tam.g7.forward(&tr.stdv[b * P], &tr.g7_pre[b * Pb]);
            for (std::size_t i = 0; i < Pb; ++i) hidden[i] = std::max(0.0, tr.g7_pre[b * Pb + i]);
            m.tam.g8.forward(hidden.data(), &tr.a2[b * P]);
            for (std::size_t p = 0; p < P; ++p) {
                double acc = m.tam.merge_bias.value[0];
                for (std::size_t k = 0; k < Km; ++k) {
                    const std::ptrdiff_t q = static_cast<std::ptrdiff_t>(p + k) - half;
                    if (q < 0 || q >= static_cast<std::ptrdiff_t>(P)) continue;
                    acc += mw[k] * tr.a1[b * P + static_cast<std::size_t>(q)] +
                           mw[Km + k] * tr.a2[b * P + static_cast<std::size_t>(q)];
                }
                tr.merge_pre[b * P + p] = acc;
                tr.attn[b * P + p] = std::max(0.0, acc);
            }
            double* r = &tr.features[b * H];
            for (std::size_t p = 0; p < P; ++p) {
                const double a = tr.attn[b * P + p];
                if (a == 0.0) continue;
                const double* hp = &tr.hseq[(b * P + p) * H];
                for (std::size_t h = 0; h < H; ++h) r[h] += a * hp[h];
            }
        }
    } else {
        const double inv = 1.0 / static_cast<double>(P);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t p = 0; p < P; ++p)
                for (std::size_t h = 0; h < H; ++h) tr.features[b * H + h] += inv * tr.hseq[(b * P + p) * H + h];
    }

    // classifier
    tr.logits.assign(batch * K, 0.0);
    tr.probs.assign(batch * K, 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
        const double* r = &tr.features[b * H];
        for (std::size_t h = 0; h < H; ++h)
            if (!std::isfinite(r[h])) throw NumericError("forward: non-finite feature");
        m.classifier.forward(r, &tr.logits[b * K]);
        const double mx = *std::max_element(&tr.logits[b * K], &tr.logits[b * K] + K);
        double z = 0.0;
        for (std::size_t c = 0; c < K; ++c) z += (tr.probs[b * K + c] = std::exp(tr.logits[b * K + c] - mx));
        for (std::size_t c = 0; c < K; ++c) tr.probs[b * K + c] /= z;
    }
    return tr;
}

// Folds the batch statistics of a training-mode trace into the running stats.
inline void commit_batch_stats(Model& m, const Trace& tr) {
    if (!tr.training) return;
    const double mom = m.cfg.bn_momentum;
    const double n = static_cast<double>(tr.batch * m.cfg.window);
    for (std::size_t i = 0; i < 4; ++i) {
        auto& br = m.branches[i];
        if (br.norm != NormKind::BatchNorm) continue;
        const auto& bt = tr.branches[i];
        for (std::size_t v = 0; v < m.cfg.num_vars; ++v) {
            br.running_mean[v] = (1 - mom) * br.running_mean[v] + mom * bt.mean[v];
            br.running_var[v] = (1 - mom) * br.running_var[v] + mom * bt.batch_var[v] * n / (n - 1);
        }
    }
}

// Accumulates d(loss)/d(param) into Param::grad. dlogits is B x k; dfeatures
// (B x H, may be empty) is an extra gradient on the pooled features.
inline void backward(Model& m, const Trace& tr, std::span<const double> dlogits, std::span<const double> dfeatures) {
    if (tr.version != m.version) throw StateError("backward: trace is stale (parameters changed since forward)");
    const ModelConfig& cfg = m.cfg;
    const std::size_t B = tr.batch, V = cfg.num_vars, T = cfg.window, H = cfg.hidden, C = cfg.branch_channels();
    const std::size_t P = cfg.seq_positions(), K = cfg.num_classes;
    if (dlogits.size() != B * K) throw ShapeError("backward: dlogits must be B x k");
    if (!dfeatures.empty() && dfeatures.size() != B * H) throw ShapeError("backward: dfeatures must be B x H");

    std::vector<double> dr(B * H, 0.0);
    if (!dfeatures.empty()) std::copy(dfeatures.begin(), dfeatures.end(), dr.begin());
    for (std::size_t b = 0; b < B; ++b) m.classifier.backward(&tr.features[b * H], &dlogits[b * K], &dr[b * H]);

    std::vector<double> dhseq(B * P * H, 0.0);
    if (cfg.use_tam) {
        const std::size_t Pb = cfg.tam_bottleneck(), Km = cfg.tam_kernel;
        const auto half = static_cast<std::ptrdiff_t>(Km / 2);
        std::vector<double> dattn(P), dm(P), da1(P), da2(P), davg(P), dstd(P), hidden(Pb), dhidden(Pb);
        const double* mw = m.tam.merge_weight.data();
        double* gmw = m.tam.merge_weight.grad.data();
        for (std::size_t b = 0; b < B; ++b) {
            const double* drb = &dr[b * H];
            for (std::size_t p = 0; p < P; ++p) {
                const double* hp = &tr.hseq[(b * P + p) * H];
                double* dhp = &dhseq[(b * P + p) * H];
                const double a = tr.attn[b * P + p];
                double s = 0.0;
                for (std::size_t h = 0; h < H; ++h) {
                    s += drb[h] * hp[h];
                    dhp[h] += drb[h] * a;
                }
                dattn[p] = s;
                dm[p] = tr.merge_pre[b * P + p] > 0 ? s : 0.0;
            }
            std::fill(da1.begin(), da1.end(), 0.0);
            std::fill(da2.begin(), da2.end(), 0.0);
            for (std::size_t p = 0; p < P; ++p) {
                if (dm[p] == 0.0) continue;
                m.tam.merge_bias.grad[0] += dm[p];
                for (std::size_t k = 0; k < Km; ++k) {
                    const std::ptrdiff_t q = static_cast<std::ptrdiff_t>(p + k) - half;
                    if (q < 0 || q >= static_cast<std::ptrdiff_t>(P)) continue;
                    const auto qi = static_cast<std::size_t>(q);
                    gmw[k] += dm[p] * tr.a1[b * P + qi];
                    gmw[Km + k] += dm[p] * tr.a2[b * P + qi];
                    da1[qi] += dm[p] * mw[k];
                    da2[qi] += dm[p] * mw[Km + k];
                }
            }
            std::fill(davg.begin(), davg.end(), 0.0);
            std::fill(dhidden.begin(), dhidden.end(), 0.0);
            for (std::size_t i = 0; i < Pb; ++i) hidden[i] = std::max(0.0, tr.g5_pre[b * Pb + i]);
            m.tam.g6.backward(hidden.data(), da1.data(), dhidden.data());
            for (std::size_t i = 0; i < Pb; ++i)
                if (tr.g5_pre[b * Pb + i] <= 0) dhidden[i] = 0.0;
            m.tam.g5.backward(&tr.avg[b * P], dhidden.data(), davg.data());
            std::fill(dstd.begin(), dstd.end(), 0.0);
            std::fill(dhidden.begin(), dhidden.end(), 0.0);
            for (std::size_t i = 0; i < Pb; ++i) hidden[i] = std::max(0.0, tr.g7_pre[b * Pb + i]);
            m.tam.g8.backward(hidden.data(), da2.data(), dhidden.data());
            for (std::size_t i = 0; i < Pb; ++i)
                if (tr.g7_pre[b * Pb + i] <= 0) dhidden[i] = 0.0;
            m.tam.g7.backward(&tr.stdv[b * P], dhidden.data(), dstd.data());
            const double inv_h = 1.0 / static_cast<double>(H);
            for (std::size_t p = 0; p < P; ++p) {
                const double* hp = &tr.hseq[(b * P + p) * H];
                double* dhp = &dhseq[(b * P + p) * H];
                const double mean = tr.avg[b * P + p], sd = tr.stdv[b * P + p];
                for (std::size_t h = 0; h < H; ++h)
                    dhp[h] += davg[p] * inv_h + dstd[p] * (hp[h] - mean) * inv_h / sd;
            }
        }
    } else {
        const double inv = 1.0 / static_cast<double>(P);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t p = 0; p < P; ++p)
                for (std::size_t h = 0; h < H; ++h) dhseq[(b * P + p) * H + h] = inv * dr[b * H + h];
    }

    std::vector<double> dseq(B * T * C, 0.0);
    detail::gru_backward(cfg, m.forward_gru, false, B, tr.seq, tr.fwd, dhseq, 0, dseq);
    if (cfg.bidirectional) detail::gru_backward(cfg, m.backward_gru, true, B, tr.seq, tr.bwd, dhseq, T, dseq);

    std::vector<double> dnorm(B * V * T), dconv(B * V * T);
    for (std::size_t i = 0; i < 4; ++i) {
        auto& br = m.branches[i];
        const auto& bt = tr.branches[i];
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t v = 0; v < V; ++v)
                for (std::size_t t = 0; t < T; ++t) {
                    const std::size_t c = i * V + v;
                    const double pre = tr.pre_concat[(b * C + c) * T + t];
                    dnorm[(b * V + v) * T + t] = pre > 0 ? dseq[(b * T + t) * C + c] : 0.0;
                }
        detail::norm_backward(cfg, br, B, tr.training, bt, dnorm, dconv);
        const auto half = static_cast<std::ptrdiff_t>(br.kernel / 2);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t v = 0; v < V; ++v) {
                const double* x = &tr.input[(b * V + v) * T];
                const double* g = &dconv[(b * V + v) * T];
                double* gw = br.weight.grad.data() + v * br.kernel;
                for (std::size_t t = 0; t < T; ++t) {
                    if (g[t] == 0.0) continue;
                    for (std::size_t k = 0; k < br.kernel; ++k) {
                        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - half;
                        if (src >= 0 && src < static_cast<std::ptrdiff_t>(T)) gw[k] += g[t] * x[src];
                    }
                }
            }
    }
}

// Learning rate for a zero-based epoch: base * decay^(epoch / step).
inline double learning_rate(std::size_t epoch, double base = 0.01, double decay = 0.3, std::size_t step = 3) {
    return base * std::pow(decay, static_cast<double>(epoch / step));
}

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t step = 0;
    std::vector<std::vector<double>> m, v;
};

inline AdamState make_adam(const Model& model) {
    AdamState s;
    for (const Param* p : model.parameters()) {
        s.m.emplace_back(p->size(), 0.0);
        s.v.emplace_back(p->size(), 0.0);
    }
    return s;
}

inline void adam_step(Model& model, AdamState& s, double lr) {
    auto params = model.parameters();
    if (s.m.size() != params.size()) throw StateError("adam_step: optimizer state does not match model");
    for (const Param* p : params)
        for (double g : p->grad)
            if (!std::isfinite(g)) throw NumericError("adam_step: non-finite gradient in " + p->name);
    ++s.step;
    const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
    const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Param& p = *params[i];
        auto& m = s.m[i];
        auto& v = s.v[i];
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double g = p.grad[j];
            m[j] = s.beta1 * m[j] + (1 - s.beta1) * g;
            v[j] = s.beta2 * v[j] + (1 - s.beta2) * g * g;
            p.value[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + s.eps);
        }
    }
    ++model.version;
}

struct Outputs {
    Eigen::MatrixXd features;  // n x H
    Eigen::MatrixXd logits;    // n x k
};

// Inference-mode forward over a window list, in fixed-size chunks.
inline Outputs infer(const Model& m, const std::vector<Window>& windows, std::size_t chunk = 256) {
    const std::size_t n = windows.size(), H = m.cfg.hidden, K = m.cfg.num_classes;
    Outputs out{Eigen::MatrixXd(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(H)),
                Eigen::MatrixXd(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(K))};
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < n; start += chunk) {
        const std::size_t end = std::min(n, start + chunk);
        idx.resize(end - start);
        for (std::size_t i = start; i < end; ++i) idx[i - start] = i;
        const auto batch = pack_batch(windows, idx);
        const Trace tr = forward(m, batch, idx.size(), false);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            for (std::size_t h = 0; h < H; ++h)
                out.features(static_cast<Eigen::Index>(start + i), static_cast<Eigen::Index>(h)) = tr.features[i * H + h];
            for (std::size_t c = 0; c < K; ++c)
                out.logits(static_cast<Eigen::Index>(start + i), static_cast<Eigen::Index>(c)) = tr.logits[i * K + c];
        }
    }
    return out;
}

}  // namespace fgcrn::net
