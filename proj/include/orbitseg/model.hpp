#pragma once

// SEQ-UNET: a 2D attention U-Net over 3-slice sequences with a bidirectional
// convolutional LSTM at the bottleneck and another after the last decoder
// block, plus the domain discriminator attached to the bottleneck features.
//
// Frames are laid out batch-major inside the network: frame b*T + t is time
// step t of sequence b.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "orbitseg/layers.hpp"
#include "orbitseg/random.hpp"
#include "orbitseg/tensor.hpp"

namespace orbitseg {

// Architecture hyper-parameters. width_divisor scales every channel count;
// 1 reproduces the published layout (64/128/256 encoder channels).
struct ModelConfig {
    int input_size = 64;
    int seq_len = 3;
    int width_divisor = 1;

    int encoder_channels(int level) const { return (64 << level) / width_divisor; }
    int bottleneck_hidden() const { return 256 / width_divisor; }
    int output_hidden() const { return 32 / width_divisor; }
    int disc_input_channels() const { return 2 * bottleneck_hidden(); }
    int disc_conv_channels(int i) const;  // 256, 128, 128 before scaling
    static constexpr int disc_fc_hidden = 10;
    static constexpr int domain_classes = 2;
    int bottleneck_size() const { return input_size / 8; }
    int disc_spatial_out() const;

    void validate() const;
    std::uint64_t fingerprint() const;
    bool operator==(const ModelConfig&) const = default;
};

enum class ParamGroup { Encoder, Bottleneck, Attention, Decoder, OutputLstm, Head, Discriminator };

const char* group_name(ParamGroup g);

// The feature extractor E: encoder blocks plus the bottleneck C-LSTM.
inline bool in_extractor(ParamGroup g) { return g == ParamGroup::Encoder || g == ParamGroup::Bottleneck; }

template <typename T>
struct Weight {
    Tensor<T> value;
    Tensor<T> grad;

    Weight() = default;
    explicit Weight(const Shape4& s) : value(s), grad(s) {}
};

template <typename T>
struct ConvParams {
    Weight<T> weight;  // Cout x Cin x K x K
    Weight<T> bias;    // Cout x 1 x 1 x 1, empty when unbiased
    int stride = 1;
    int pad = 0;

    ConvParams() = default;
    ConvParams(int cin, int cout, int kernel, int stride_, int pad_, bool with_bias);
    int in_channels() const { return weight.value.c(); }
    int out_channels() const { return weight.value.n(); }
    const T* bias_ptr() const { return bias.value.empty() ? nullptr : bias.value.data(); }
    T* bias_grad_ptr() { return bias.grad.empty() ? nullptr : bias.grad.data(); }
};

// Additive attention gate: q = psi . ReLU(Wx x + Wg g + b_g) + b_psi, alpha = sigmoid(q).
template <typename T>
struct AttentionGateParams {
    ConvParams<T> wx;   // C_x -> F_int, 1x1, no bias
    ConvParams<T> wg;   // C_g -> F_int, 1x1, bias b_g
    ConvParams<T> psi;  // F_int -> 1, 1x1, bias b_psi

    AttentionGateParams() = default;
    AttentionGateParams(int x_channels, int g_channels, int f_int);
    int intermediate() const { return wx.out_channels(); }
};

// Convolutional LSTM without peephole terms. The four gate kernels share one
// tensor over [input, hidden] channels, blocked as (input, forget, output, candidate).
template <typename T>
struct ConvLstmParams {
    ConvParams<T> gates;  // (Cin + Ch) -> 4 Ch, 3x3, pad 1
    int input_channels = 0;
    int hidden = 0;

    ConvLstmParams() = default;
    ConvLstmParams(int cin, int ch);
};

enum class Gate { Input = 0, Forget = 1, Output = 2, Candidate = 3 };

template <typename T>
struct SeqUnetParams {
    ConvParams<T> enc[3][2];
    ConvLstmParams<T> bottleneck_fwd, bottleneck_bwd;
    AttentionGateParams<T> att[3];  // att[l] gates encoder level l
    ConvParams<T> dec3[2], dec2[2], dec1;
    ConvLstmParams<T> output_fwd, output_bwd;
    ConvParams<T> head;

    SeqUnetParams() = default;
    explicit SeqUnetParams(const ModelConfig& cfg);

    // Visits (name, group, weight) for every learnable array in a fixed order.
    template <typename F>
    void for_each(F&& f);
    template <typename F>
    void for_each(F&& f) const;
};

template <typename T>
struct DiscriminatorParams {
    ConvParams<T> conv[3];  // 5x5, stride 2, pad 2
    ConvParams<T> fc1;      // as Out x In x 1 x 1
    ConvParams<T> fc2;

    DiscriminatorParams() = default;
    explicit DiscriminatorParams(const ModelConfig& cfg);

    template <typename F>
    void for_each(F&& f);
    template <typename F>
    void for_each(F&& f) const;
};

// Xavier (Glorot) uniform weights, zero biases; C-LSTM forget bias starts at 1.
template <typename T>
void xavier_init(SeqUnetParams<T>& p, Rng& rng);
template <typename T>
void xavier_init(DiscriminatorParams<T>& p, Rng& rng);

// Named output dimensions recorded during a forward pass.
using ShapeTrace = std::vector<std::pair<std::string, Shape4>>;

// ---------------------------------------------------------------------------
// Attention gate

template <typename T>
struct AttentionCache {
    Tensor<T> relu;   // N x F_int x H x W
    Tensor<T> alpha;  // N x 1 x H x W
};

// x: skip features N x C_x x H x W; g: gate features N x C_g x H x W.
template <typename T>
Tensor<T> attention_gate(const Tensor<T>& x, const Tensor<T>& g, const AttentionGateParams<T>& p,
                         AttentionCache<T>* cache = nullptr);

template <typename T>
void attention_gate_backward(const Tensor<T>& x, const Tensor<T>& g, AttentionGateParams<T>& p,
                             const AttentionCache<T>& cache, const Tensor<T>& dout, Tensor<T>* dx, Tensor<T>* dg);

// ---------------------------------------------------------------------------
// Convolutional LSTM

template <typename T>
struct LstmStepCache {
    Tensor<T> xh;      // [x, h_prev]
    Tensor<T> gates;   // activated i, f, o, g
    Tensor<T> c_prev;
    Tensor<T> tanh_c;
};

template <typename T>
struct LstmState {
    Tensor<T> h;
    Tensor<T> c;
};

// One step over a batch: x N x Cin x H x W, h and c N x Ch x H x W.
template <typename T>
LstmState<T> conv_lstm_step(const Tensor<T>& x, const Tensor<T>& h, const Tensor<T>& c, const ConvLstmParams<T>& p,
                            LstmStepCache<T>* cache = nullptr);

// Accumulates parameter gradients; writes (overwrites) dh_prev/dc_prev and accumulates dx.
template <typename T>
void conv_lstm_step_backward(ConvLstmParams<T>& p, const LstmStepCache<T>& cache, const Tensor<T>& dh,
                             const Tensor<T>& dc, Tensor<T>* dx, Tensor<T>& dh_prev, Tensor<T>& dc_prev);

enum class SequenceMode { PerStep, Center };

inline int center_step(int seq_len) { return (seq_len - 1) / 2; }

template <typename T>
struct BiLstmCache {
    int batch = 0;
    int steps = 0;
    SequenceMode mode = SequenceMode::PerStep;
    std::vector<int> fwd_order, bwd_order;
    std::vector<LstmStepCache<T>> fwd, bwd;
};

// seq: (batch * steps) x Cin x H x W. PerStep returns (batch * steps) x 2Ch x H x W;
// Center returns batch x 2Ch x H x W for the middle step. Zero initial states.
template <typename T>
Tensor<T> bidirectional_clstm(const Tensor<T>& seq, int batch, const ConvLstmParams<T>& fwd,
                              const ConvLstmParams<T>& bwd, SequenceMode mode, BiLstmCache<T>* cache = nullptr);

// Accumulates into dseq (same shape as seq) when non-null.
template <typename T>
void bidirectional_clstm_backward(ConvLstmParams<T>& fwd, ConvLstmParams<T>& bwd, const BiLstmCache<T>& cache,
                                  const Tensor<T>& dout, Tensor<T>* dseq);

// ---------------------------------------------------------------------------
// Networks

template <typename T>
struct SeqUnetCache {
    int batch = 0;
    Tensor<T> input;
    Tensor<T> e1a, e1, p1, e2a, e2, p2, e3a, e3, p3;
    std::vector<std::int32_t> am1, am2, am3;
    BiLstmCache<T> bottleneck_lstm;
    Tensor<T> bottleneck;
    Tensor<T> u1, a3, cat1, d3a, d3;
    Tensor<T> u2, a2, cat2, d2a, d2;
    Tensor<T> u3, a1, cat3, d1;
    AttentionCache<T> att[3];
    BiLstmCache<T> output_lstm;
    Tensor<T> lstm_out;
    Tensor<T> prob;
};

struct ForwardOptions {
    // Skip connections pass encoder features through unchanged (alpha == 1).
    bool bypass_attention = false;
    // Stop after the bottleneck C-LSTM (feature extractor only).
    bool extractor_only = false;
};

template <typename T>
class SeqUnet {
public:
    SeqUnet() = default;
    SeqUnet(const ModelConfig& cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    SeqUnetParams<T>& params() { return params_; }
    const SeqUnetParams<T>& params() const { return params_; }

    // x: (batch * seq_len) x 1 x H x W. Fills cache.prob (batch x 1 x H x W) and
    // cache.bottleneck ((batch * seq_len) x 2Ch x H/8 x W/8).
    void forward(const Tensor<T>& x, int batch, SeqUnetCache<T>& cache, const ForwardOptions& opt = {},
                 ShapeTrace* trace = nullptr) const;

    // dprob: batch x 1 x H x W; dbottleneck optional extra gradient on the
    // bottleneck features. With extractor_grads false the pass stops at the
    // bottleneck and encoder/bottleneck gradients are left untouched.
    void backward(SeqUnetCache<T>& cache, const Tensor<T>& dprob, const Tensor<T>* dbottleneck,
                  bool extractor_grads = true);

    void zero_grad();
    std::size_t parameter_count() const;

private:
    ModelConfig cfg_;
    SeqUnetParams<T> params_;
};

template <typename T>
struct DiscriminatorCache {
    int batch = 0;
    int steps = 0;
    Tensor<T> summed;
    Tensor<T> c1, c2, c3;  // post-activation
    Tensor<T> f1;          // post-ReLU
    Tensor<T> logits;      // batch x 2 x 1 x 1
};

template <typename T>
class Discriminator {
public:
    Discriminator() = default;
    Discriminator(const ModelConfig& cfg, std::uint64_t seed);

    static constexpr double leaky_slope = 0.2;

    const ModelConfig& config() const { return cfg_; }
    DiscriminatorParams<T>& params() { return params_; }
    const DiscriminatorParams<T>& params() const { return params_; }

    // bottleneck: (batch * steps) x C x h x w. Steps are summed per sequence.
    void forward(const Tensor<T>& bottleneck, int batch, DiscriminatorCache<T>& cache,
                 ShapeTrace* trace = nullptr) const;
    // Accumulates parameter gradients; accumulates into dbottleneck when non-null.
    void backward(const DiscriminatorCache<T>& cache, const Tensor<T>& dlogits, Tensor<T>* dbottleneck);

    void zero_grad();

private:
    ModelConfig cfg_;
    DiscriminatorParams<T> params_;
};

// Gathers time step t of every sequence: (batch*steps) x C x H x W -> batch x C x H x W.
template <typename T>
Tensor<T> gather_step(const Tensor<T>& seq, int batch, int steps, int t);

// ---------------------------------------------------------------------------
// for_each implementations

#define ORBITSEG_CONV_VISIT(prefix, conv, group)                  \
    f(std::string(prefix) + ".weight", group, (conv).weight);     \
    if (!(conv).bias.value.empty()) f(std::string(prefix) + ".bias", group, (conv).bias)

template <typename T>
template <typename F>
void SeqUnetParams<T>::for_each(F&& f) {
    for (int l = 0; l < 3; ++l)
        for (int i = 0; i < 2; ++i) {
            ORBITSEG_CONV_VISIT("enc" + std::to_string(l + 1) + "." + std::to_string(i), enc[l][i], ParamGroup::Encoder);
        }
    ORBITSEG_CONV_VISIT("bottleneck.fwd", bottleneck_fwd.gates, ParamGroup::Bottleneck);
    ORBITSEG_CONV_VISIT("bottleneck.bwd", bottleneck_bwd.gates, ParamGroup::Bottleneck);
    for (int l = 0; l < 3; ++l) {
        const std::string base = "att" + std::to_string(l + 1);
        ORBITSEG_CONV_VISIT(base + ".wx", att[l].wx, ParamGroup::Attention);
        ORBITSEG_CONV_VISIT(base + ".wg", att[l].wg, ParamGroup::Attention);
        ORBITSEG_CONV_VISIT(base + ".psi", att[l].psi, ParamGroup::Attention);
    }
    ORBITSEG_CONV_VISIT("dec3.0", dec3[0], ParamGroup::Decoder);
    ORBITSEG_CONV_VISIT("dec3.1", dec3[1], ParamGroup::Decoder);
    ORBITSEG_CONV_VISIT("dec2.0", dec2[0], ParamGroup::Decoder);
    ORBITSEG_CONV_VISIT("dec2.1", dec2[1], ParamGroup::Decoder);
    ORBITSEG_CONV_VISIT("dec1.0", dec1, ParamGroup::Decoder);
    ORBITSEG_CONV_VISIT("output.fwd", output_fwd.gates, ParamGroup::OutputLstm);
    ORBITSEG_CONV_VISIT("output.bwd", output_bwd.gates, ParamGroup::OutputLstm);
    ORBITSEG_CONV_VISIT("head", head, ParamGroup::Head);
}

template <typename T>
template <typename F>
void SeqUnetParams<T>::for_each(F&& f) const {
    const_cast<SeqUnetParams<T>*>(this)->for_each(
        [&](const std::string& name, ParamGroup g, Weight<T>& w) { f(name, g, static_cast<const Weight<T>&>(w)); });
}

template <typename T>
template <typename F>
void DiscriminatorParams<T>::for_each(F&& f) {
    for (int i = 0; i < 3; ++i) {
        ORBITSEG_CONV_VISIT("disc.conv" + std::to_string(i + 1), conv[i], ParamGroup::Discriminator);
    }
    ORBITSEG_CONV_VISIT("disc.fc1", fc1, ParamGroup::Discriminator);
    ORBITSEG_CONV_VISIT("disc.fc2", fc2, ParamGroup::Discriminator);
}

template <typename T>
template <typename F>
void DiscriminatorParams<T>::for_each(F&& f) const {
    const_cast<DiscriminatorParams<T>*>(this)->for_each(
        [&](const std::string& name, ParamGroup g, Weight<T>& w) { f(name, g, static_cast<const Weight<T>&>(w)); });
}

#undef ORBITSEG_CONV_VISIT

}  // namespace orbitseg
