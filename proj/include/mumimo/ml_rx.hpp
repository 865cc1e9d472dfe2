#pragma once

#include "mumimo/autodiff.hpp"
#include "mumimo/channel.hpp"
#include "mumimo/common.hpp"
#include "mumimo/downlink.hpp"
#include "mumimo/estimator.hpp"
#include "mumimo/grid.hpp"
#include "mumimo/uplink_rx.hpp"

#include <string>
#include <vector>

namespace mumimo {

enum class Direction { Uplink, Downlink };
enum class Scheme { Baseline, PerfectCsi, MlChest, MlReceiver };

const char* to_string(Direction d);
const char* to_string(Scheme s);
Direction direction_from_string(const std::string& s);
Scheme scheme_from_string(const std::string& s);
inline bool is_ml(Scheme s) { return s == Scheme::MlChest || s == Scheme::MlReceiver; }

/// Stack of "same"-padded convolutions with ReLU between layers (none after the last).
struct Cnn {
    struct Layer {
        ad::Tensor w, b;
    };
    std::vector<Layer> layers;

    ad::Tensor forward(const ad::Tensor& x) const;
};

/// He-normal weights, zero biases. channels = {in, hidden..., out}.
Cnn make_cnn(const std::vector<int>& channels, int kh, int kw, Rng& rng);

/// T[m, n] = exp(-gamma |m - n|) exp(j theta (m - n)).
CMat decay_template(double gamma, double theta, int n_m);

struct MlParams {
    Direction direction = Direction::Uplink;
    int bits_per_symbol = 4;
    Cnn cnn_e;
    Cnn cnn_l;
    Cnn cnn_demap;
    ad::Tensor gamma_raw;  // gamma = softplus(gamma_raw)
    ad::Tensor theta_p;

    double gamma() const;
    double theta() const { return theta_p.value()[0]; }
    std::vector<ad::NamedTensor> named() const;
    /// Parameters trained by `scheme`; ml_chest leaves the demapper untouched.
    std::vector<ad::Tensor> trainable(Scheme scheme) const;
};

inline constexpr int kCnnChannels = 16;
inline constexpr double kGammaInit = kPi;

int cnn_e_inputs(Direction d);
int cnn_e_outputs(Direction d);

MlParams init_ml_params(Direction direction, int bits_per_symbol, std::uint64_t seed);
/// Sets every CNN weight and bias of the demapper to zero.
void zero_demapper(MlParams& p);

/// Per-user, per-subcarrier mean over antennas of |H_hat(t_p2) - H_hat(t_p1)|^2
/// between the two uplink pilot symbols. Zero for OneP.
std::vector<std::vector<double>> doppler_feature(const ChannelTensor& h_hat, const PilotPattern& pattern);
/// Same statistic from per-user scalar downlink estimates g_hat (N_f, N_t, N_k).
std::vector<std::vector<double>> doppler_feature(const CTensor3& g_hat, const PilotPattern& dl_pattern);

/// CNN_l: [N_k, 1, 1, N_f] raw feature -> positive scalar per user, broadcast
/// to a [N_k, 1, N_f, N_t] plane. OneP gives a constant zero plane.
ad::Tensor doppler_plane(const MlParams& p, const std::vector<std::vector<double>>& raw, const PilotPattern& pattern);

/// Constant feature planes [N_k, C, N_f, N_t] (everything but the doppler plane).
ad::Tensor uplink_feature_planes(const PilotPattern& pattern, double sigma2);
/// Downlink planes also carry the distance to the last uplink pilot symbol.
ad::Tensor downlink_feature_planes(const PilotPattern& dl_pattern, const PilotPattern& ul_pattern, double sigma2);

/// s_k = softplus(CNN_E(features)), [N_k, 1, N_f, N_t].
ad::Tensor predict_error_scale(const MlParams& p, const ad::Tensor& features);
/// E_hat_{f,t} = (sum_k s_k(f,t)) T(gamma, theta) over the uplink slot.
ErrorStats predict_error_stats(const MlParams& p, const ad::Tensor& features, int n_m);

/// Inputs of the differentiable grouped-LMMSE equalizer that carry no gradient.
struct EqualizerContext {
    const ChannelTensor* h_hat = nullptr;
    const CTensor3* y = nullptr;
    double sigma2 = 0.0;
    const std::vector<EqualizerGroup>* groups = nullptr;
    const PilotPattern* pattern = nullptr;
};

/// Grouped-LMMSE equalization with E_{f,t} = s_tot(f,t) T(gamma, theta).
/// s_tot [1, 1, N_f, N_t], gamma [1], theta [1] -> [N_k, 3, N_f, N_t] holding
/// (Re x_hat, Im x_hat, nu^2). Pilot REs output (0, 0, 1) and carry no gradient.
ad::Tensor grouped_equalizer(const ad::Tensor& s_tot, const ad::Tensor& gamma, const ad::Tensor& theta,
                             const EqualizerContext& ctx);

/// Exact demapper as a graph op: [N_k, 3, N_f, N_t] -> [N_k, M, N_f, N_t].
/// REs with mask 0 give zero LLRs.
ad::Tensor demap_op(const ad::Tensor& eq, const Constellation& c, const std::vector<std::uint8_t>& re_mask);

/// Conventional LLRs plus the CNN correction. Input planes: Re x_hat,
/// Im x_hat, nu^2 and tanh(LLR / 8).
ad::Tensor cnn_demap(const MlParams& p, const ad::Tensor& eq, const ad::Tensor& llr_conv);

/// Data-RE mask (N_f * N_t, f-major) of a slot pattern.
std::vector<std::uint8_t> data_mask(const PilotPattern& pattern);

/// Precomputed receiver inputs of one uplink RG.
struct UplinkSample {
    ChannelTensor h_hat;  // LMMSE estimate
    CTensor3 y;
    double sigma2 = 0.0;
    std::vector<std::vector<std::uint8_t>> bits;  // per user, (f, t, bit) over data REs
    std::vector<std::vector<double>> doppler_raw;
};

/// Precomputed UE-side inputs of one downlink RG.
struct DownlinkSample {
    CTensor3 r;      // received downlink slot (N_f, N_t, N_k)
    CTensor3 g_hat;  // UE LMMSE estimates
    double sigma2 = 0.0;
    std::vector<std::vector<std::uint8_t>> bits;
    std::vector<std::vector<double>> doppler_raw;
};

/// Geometry shared by all samples of a run.
struct MlContext {
    PilotPattern pattern;     // uplink: receive pattern; downlink: UE pilot pattern
    PilotPattern ul_pattern;  // pattern the BS estimated with (downlink only)
    std::vector<EqualizerGroup> groups;
    Constellation constellation;
    std::vector<std::uint8_t> mask;

    MlContext(const PilotPattern& pattern, const PilotPattern& ul_pattern, int bits_per_symbol);
};

struct ForwardResult {
    ad::Tensor llr;   // [N_k, M, N_f, N_t]
    ad::Tensor loss;  // BCE over data bits
    ad::Tensor error_scale;  // uplink: s_k; downlink: (v_hat, j_hat)
};

/// Bit targets and weights [N_k, M, N_f, N_t] from per-user bit vectors.
std::pair<ad::Tensor, ad::Tensor> bit_targets(const std::vector<std::vector<std::uint8_t>>& bits, const MlContext& ctx,
                                              int n_k);

ForwardResult forward_uplink(const MlParams& p, const UplinkSample& s, const MlContext& ctx, Scheme scheme);
ForwardResult forward_downlink(const MlParams& p, const DownlinkSample& s, const MlContext& ctx, Scheme scheme);

/// Converts an LLR tensor to per-user vectors in (f, t, bit) data order.
std::vector<std::vector<double>> llr_tensor_to_users(const ad::Tensor& llr, const MlContext& ctx);

struct TrainOptions {
    int epochs = 1;
    int batch_size = 27;
    double learning_rate = 1e-3;
    /// Stop once this many optimizer steps ran (0 = no limit).
    int max_steps = 0;
    /// Wall-clock budget in seconds (0 = none); checked between steps.
    double time_budget_s = 0.0;
    bool verbose = false;
};

struct TrainLogEntry {
    int step = 0;
    double loss = 0.0;
    double gamma = 0.0;
};

struct TrainResult {
    std::vector<TrainLogEntry> log;
    int steps = 0;
};

/// Adam on the mean BCE of each batch, end to end through the equalizer
/// (uplink) or tau^2 (downlink) and the demapper. Non-finite losses abort.
TrainResult train(const std::vector<UplinkSample>& data, const MlContext& ctx, Scheme scheme, MlParams& params,
                  const TrainOptions& opt, Rng& rng, ad::Adam* adam = nullptr);
TrainResult train(const std::vector<DownlinkSample>& data, const MlContext& ctx, Scheme scheme, MlParams& params,
                  const TrainOptions& opt, Rng& rng, ad::Adam* adam = nullptr);

void write_train_log(const std::string& path, const std::vector<TrainLogEntry>& log);

}  // namespace mumimo
