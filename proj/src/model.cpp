#include "orbitseg/model.hpp"

#include <cmath>
#include <stdexcept>

namespace orbitseg {

using namespace nn;

// ---------------------------------------------------------------------------
// Configuration

int ModelConfig::disc_conv_channels(int i) const {
    static constexpr int base[3] = {256, 128, 128};
    return base[i] / width_divisor;
}

int ModelConfig::disc_spatial_out() const {
    int s = bottleneck_size();
    for (int i = 0; i < 3; ++i) s = conv_out_size(s, 5, 2, 2);
    return s;
}

void ModelConfig::validate() const {
    if (input_size < 8 || input_size % 8 != 0)
        throw std::invalid_argument("model input size must be a positive multiple of 8, got " +
                                    std::to_string(input_size));
    if (seq_len < 1) throw std::invalid_argument("sequence length must be >= 1");
    if (width_divisor < 1 || width_divisor > 32 || (width_divisor & (width_divisor - 1)) != 0)
        throw std::invalid_argument("width divisor must be a power of two in [1, 32], got " +
                                    std::to_string(width_divisor));
}

std::uint64_t ModelConfig::fingerprint() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](std::uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= (v >> (8 * i)) & 0xffu;
            h *= 1099511628211ull;
        }
    };
    mix(0x5345515f554e4554ull);  // layout tag
    mix(static_cast<std::uint64_t>(input_size));
    mix(static_cast<std::uint64_t>(seq_len));
    mix(static_cast<std::uint64_t>(width_divisor));
    return h;
}

const char* group_name(ParamGroup g) {
    switch (g) {
        case ParamGroup::Encoder: return "encoder";
        case ParamGroup::Bottleneck: return "bottleneck";
        case ParamGroup::Attention: return "attention";
        case ParamGroup::Decoder: return "decoder";
        case ParamGroup::OutputLstm: return "output_lstm";
        case ParamGroup::Head: return "head";
        case ParamGroup::Discriminator: return "discriminator";
    }
    return "unknown";
}

// ---------------------------------------------------------------------------
// Parameter containers

template <typename T>
ConvParams<T>::ConvParams(int cin, int cout, int kernel, int stride_, int pad_, bool with_bias)
    : weight(Shape4{cout, cin, kernel, kernel}), stride(stride_), pad(pad_) {
    if (with_bias) bias = Weight<T>(Shape4{cout, 1, 1, 1});
}

template <typename T>
AttentionGateParams<T>::AttentionGateParams(int x_channels, int g_channels, int f_int)
    : wx(x_channels, f_int, 1, 1, 0, false), wg(g_channels, f_int, 1, 1, 0, true), psi(f_int, 1, 1, 1, 0, true) {}

template <typename T>
ConvLstmParams<T>::ConvLstmParams(int cin, int ch) : gates(cin + ch, 4 * ch, 3, 1, 1, true), input_channels(cin), hidden(ch) {}

template <typename T>
SeqUnetParams<T>::SeqUnetParams(const ModelConfig& cfg) {
    cfg.validate();
    const int c1 = cfg.encoder_channels(0), c2 = cfg.encoder_channels(1), c3 = cfg.encoder_channels(2);
    const int hb = cfg.bottleneck_hidden(), ho = cfg.output_hidden();
    enc[0][0] = ConvParams<T>(1, c1, 3, 1, 1, true);
    enc[0][1] = ConvParams<T>(c1, c1, 3, 1, 1, true);
    enc[1][0] = ConvParams<T>(c1, c2, 3, 1, 1, true);
    enc[1][1] = ConvParams<T>(c2, c2, 3, 1, 1, true);
    enc[2][0] = ConvParams<T>(c2, c3, 3, 1, 1, true);
    enc[2][1] = ConvParams<T>(c3, c3, 3, 1, 1, true);
    bottleneck_fwd = ConvLstmParams<T>(c3, hb);
    bottleneck_bwd = ConvLstmParams<T>(c3, hb);
    // Gate signals are the upsampled decoder features; F_int equals the skip width.
    att[2] = AttentionGateParams<T>(c3, 2 * hb, c3);
    att[1] = AttentionGateParams<T>(c2, c3, c2);
    att[0] = AttentionGateParams<T>(c1, c2, c1);
    dec3[0] = ConvParams<T>(2 * hb + c3, c3, 3, 1, 1, true);
    dec3[1] = ConvParams<T>(c3, c3, 3, 1, 1, true);
    dec2[0] = ConvParams<T>(c3 + c2, c2, 3, 1, 1, true);
    dec2[1] = ConvParams<T>(c2, c2, 3, 1, 1, true);
    dec1 = ConvParams<T>(c2 + c1, c1, 3, 1, 1, true);
    output_fwd = ConvLstmParams<T>(c1, ho);
    output_bwd = ConvLstmParams<T>(c1, ho);
    head = ConvParams<T>(2 * ho, 1, 1, 1, 0, true);
}

template <typename T>
DiscriminatorParams<T>::DiscriminatorParams(const ModelConfig& cfg) {
    cfg.validate();
    int cin = cfg.disc_input_channels();
    for (int i = 0; i < 3; ++i) {
        conv[i] = ConvParams<T>(cin, cfg.disc_conv_channels(i), 5, 2, 2, true);
        cin = cfg.disc_conv_channels(i);
    }
    const int s = cfg.disc_spatial_out();
    fc1 = ConvParams<T>(cin * s * s, ModelConfig::disc_fc_hidden, 1, 1, 0, true);
    fc2 = ConvParams<T>(ModelConfig::disc_fc_hidden, ModelConfig::domain_classes, 1, 1, 0, true);
}

namespace {

template <typename T>
void xavier_fill(Tensor<T>& w, int fan_in, int fan_out, Rng& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(rng.uniform(-a, a));
}

template <typename T>
void xavier_conv(ConvParams<T>& c, Rng& rng) {
    const int area = c.weight.value.h() * c.weight.value.w();
    xavier_fill(c.weight.value, c.in_channels() * area, c.out_channels() * area, rng);
    c.bias.value.zero();
}

template <typename T>
void xavier_lstm(ConvLstmParams<T>& p, Rng& rng) {
    // Fans of one gate's kernel; the fused tensor holds four of them.
    const int area = 9;
    xavier_fill(p.gates.weight.value, p.gates.in_channels() * area, p.hidden * area, rng);
    p.gates.bias.value.zero();
    for (int k = 0; k < p.hidden; ++k) p.gates.bias.value[static_cast<std::size_t>(p.hidden + k)] = T(1);
}

}  // namespace

template <typename T>
void xavier_init(SeqUnetParams<T>& p, Rng& rng) {
    for (auto& level : p.enc)
        for (auto& c : level) xavier_conv(c, rng);
    xavier_lstm(p.bottleneck_fwd, rng);
    xavier_lstm(p.bottleneck_bwd, rng);
    for (auto& a : p.att) {
        xavier_conv(a.wx, rng);
        xavier_conv(a.wg, rng);
        xavier_conv(a.psi, rng);
    }
    for (auto& c : p.dec3) xavier_conv(c, rng);
    for (auto& c : p.dec2) xavier_conv(c, rng);
    xavier_conv(p.dec1, rng);
    xavier_lstm(p.output_fwd, rng);
    xavier_lstm(p.output_bwd, rng);
    xavier_conv(p.head, rng);
}

template <typename T>
void xavier_init(DiscriminatorParams<T>& p, Rng& rng) {
    for (auto& c : p.conv) xavier_conv(c, rng);
    xavier_conv(p.fc1, rng);
    xavier_conv(p.fc2, rng);
}

// ---------------------------------------------------------------------------
// Small helpers

namespace {

template <typename T>
Tensor<T> conv(const Tensor<T>& x, const ConvParams<T>& p) {
    Tensor<T> y;
    conv2d_forward(x, p.weight.value, p.bias_ptr(), p.stride, p.pad, y);
    return y;
}

template <typename T>
void conv_back(const Tensor<T>& x, ConvParams<T>& p, const Tensor<T>& dy, Tensor<T>* dx) {
    conv2d_backward(x, p.weight.value, p.stride, p.pad, dy, dx, &p.weight.grad, p.bias_grad_ptr());
}

template <typename T>
Tensor<T> conv_elu(const Tensor<T>& x, const ConvParams<T>& p) {
    Tensor<T> y;
    elu_forward(conv(x, p), y);
    return y;
}

// y = elu(conv(x)); accumulates into dx (if non-null) given dy.
template <typename T>
void conv_elu_back(const Tensor<T>& x, const Tensor<T>& y, ConvParams<T>& p, const Tensor<T>& dy, Tensor<T>* dx) {
    Tensor<T> dpre = y.like();
    elu_backward(y, dy, dpre);
    conv_back(x, p, dpre, dx);
}

template <typename T>
void zero_weight_grads(Weight<T>& w) {
    w.grad.zero();
}

void trace_push(ShapeTrace* trace, const char* name, const Shape4& s) {
    if (trace) trace->emplace_back(name, s);
}

}  // namespace

template <typename T>
Tensor<T> gather_step(const Tensor<T>& seq, int batch, int steps, int t) {
    Tensor<T> out(batch, seq.c(), seq.h(), seq.w());
    for (int b = 0; b < batch; ++b) {
        const T* src = seq.frame(b * steps + t);
        std::copy(src, src + seq.frame_size(), out.frame(b));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Attention gate

template <typename T>
Tensor<T> attention_gate(const Tensor<T>& x, const Tensor<T>& g, const AttentionGateParams<T>& p,
                         AttentionCache<T>* cache) {
    if (x.n() != g.n() || x.h() != g.h() || x.w() != g.w())
        throw ShapeError("attention_gate: skip " + shape_string(x.shape()) + " and gate " + shape_string(g.shape()) +
                         " are not aligned");
    Tensor<T> pre = conv(x, p.wx);
    accumulate(conv(g, p.wg), pre);
    Tensor<T> relu;
    relu_forward(pre, relu);
    Tensor<T> alpha;
    sigmoid_forward(conv(relu, p.psi), alpha);

    Tensor<T> out = x.like();
    const std::size_t plane = x.plane();
    for (int n = 0; n < x.n(); ++n) {
        const T* a = alpha.frame(n);
        for (int c = 0; c < x.c(); ++c) {
            const T* src = x.channel(n, c);
            T* dst = out.channel(n, c);
            for (std::size_t i = 0; i < plane; ++i) dst[i] = a[i] * src[i];
        }
    }
    if (cache) {
        cache->relu = std::move(relu);
        cache->alpha = std::move(alpha);
    }
    return out;
}

template <typename T>
void attention_gate_backward(const Tensor<T>& x, const Tensor<T>& g, AttentionGateParams<T>& p,
                             const AttentionCache<T>& cache, const Tensor<T>& dout, Tensor<T>* dx, Tensor<T>* dg) {
    const std::size_t plane = x.plane();
    const Tensor<T>& alpha = cache.alpha;
    Tensor<T> dalpha = alpha.like();
    for (int n = 0; n < x.n(); ++n) {
        const T* a = alpha.frame(n);
        T* da = dalpha.frame(n);
        for (int c = 0; c < x.c(); ++c) {
            const T* xs = x.channel(n, c);
            const T* ds = dout.channel(n, c);
            T* dxs = dx ? dx->channel(n, c) : nullptr;
            for (std::size_t i = 0; i < plane; ++i) {
                da[i] += ds[i] * xs[i];
                if (dxs) dxs[i] += ds[i] * a[i];
            }
        }
    }
    Tensor<T> dq = alpha.like();
    sigmoid_backward(alpha, dalpha, dq);
    Tensor<T> drelu = cache.relu.like();
    conv_back(cache.relu, p.psi, dq, &drelu);
    Tensor<T> dpre = cache.relu.like();
    relu_backward(cache.relu, drelu, dpre);
    conv_back(x, p.wx, dpre, dx);
    conv_back(g, p.wg, dpre, dg);
}

// ---------------------------------------------------------------------------
// Convolutional LSTM

template <typename T>
LstmState<T> conv_lstm_step(const Tensor<T>& x, const Tensor<T>& h, const Tensor<T>& c, const ConvLstmParams<T>& p,
                            LstmStepCache<T>* cache) {
    const int ch = p.hidden;
    if (x.c() != p.input_channels)
        throw ShapeError("conv_lstm_step: input has " + std::to_string(x.c()) + " channels, expected " +
                         std::to_string(p.input_channels));
    require_shape(h, Shape4{x.n(), ch, x.h(), x.w()}, "conv_lstm_step hidden state");
    require_shape(c, Shape4{x.n(), ch, x.h(), x.w()}, "conv_lstm_step cell state");

    Tensor<T> xh;
    concat_forward(x, h, xh);
    Tensor<T> gates = conv(xh, p.gates);
    const std::size_t plane = x.plane();
    const std::size_t block = static_cast<std::size_t>(ch) * plane;

    LstmState<T> next{h.like(), c.like()};
    Tensor<T> tanh_c = c.like();
    for (int n = 0; n < x.n(); ++n) {
        T* gi = gates.frame(n);
        T* gf = gi + block;
        T* go = gf + block;
        T* gg = go + block;
        const T* cp = c.frame(n);
        T* cn = next.c.frame(n);
        T* hn = next.h.frame(n);
        T* tc = tanh_c.frame(n);
        for (std::size_t i = 0; i < block; ++i) {
            gi[i] = sigmoid(gi[i]);
            gf[i] = sigmoid(gf[i]);
            go[i] = sigmoid(go[i]);
            gg[i] = std::tanh(gg[i]);
            cn[i] = gf[i] * cp[i] + gi[i] * gg[i];
            tc[i] = std::tanh(cn[i]);
            hn[i] = go[i] * tc[i];
        }
    }
    if (cache) {
        cache->xh = std::move(xh);
        cache->gates = std::move(gates);
        cache->c_prev = c;
        cache->tanh_c = std::move(tanh_c);
    }
    return next;
}

template <typename T>
void conv_lstm_step_backward(ConvLstmParams<T>& p, const LstmStepCache<T>& cache, const Tensor<T>& dh,
                             const Tensor<T>& dc, Tensor<T>* dx, Tensor<T>& dh_prev, Tensor<T>& dc_prev) {
    const int ch = p.hidden;
    const int batch = dh.n();
    const std::size_t plane = dh.plane();
    const std::size_t block = static_cast<std::size_t>(ch) * plane;
    Tensor<T> dgates = cache.gates.like();
    dc_prev = dc.like();
    for (int n = 0; n < batch; ++n) {
        const T* gi = cache.gates.frame(n);
        const T* gf = gi + block;
        const T* go = gf + block;
        const T* gg = go + block;
        const T* cp = cache.c_prev.frame(n);
        const T* tc = cache.tanh_c.frame(n);
        const T* dhn = dh.frame(n);
        const T* dcn = dc.frame(n);
        T* di = dgates.frame(n);
        T* df = di + block;
        T* dout = df + block;
        T* dg = dout + block;
        T* dcp = dc_prev.frame(n);
        for (std::size_t i = 0; i < block; ++i) {
            const T d_o = dhn[i] * tc[i];
            const T dct = dcn[i] + dhn[i] * go[i] * (T(1) - tc[i] * tc[i]);
            const T d_i = dct * gg[i];
            const T d_g = dct * gi[i];
            const T d_f = dct * cp[i];
            dcp[i] = dct * gf[i];
            di[i] = d_i * gi[i] * (T(1) - gi[i]);
            df[i] = d_f * gf[i] * (T(1) - gf[i]);
            dout[i] = d_o * go[i] * (T(1) - go[i]);
            dg[i] = d_g * (T(1) - gg[i] * gg[i]);
        }
    }
    Tensor<T> dxh = cache.xh.like();
    conv_back(cache.xh, p.gates, dgates, &dxh);
    dh_prev = dh.like();
    const std::size_t xpart = static_cast<std::size_t>(p.input_channels) * plane;
    for (int n = 0; n < batch; ++n) {
        const T* src = dxh.frame(n);
        if (dx) {
            T* dst = dx->frame(n);
            for (std::size_t i = 0; i < xpart; ++i) dst[i] += src[i];
        }
        std::copy(src + xpart, src + xpart + block, dh_prev.frame(n));
    }
}

template <typename T>
Tensor<T> bidirectional_clstm(const Tensor<T>& seq, int batch, const ConvLstmParams<T>& fwd,
                              const ConvLstmParams<T>& bwd, SequenceMode mode, BiLstmCache<T>* cache) {
    if (batch <= 0 || seq.n() == 0 || seq.n() % batch != 0)
        throw ShapeError("bidirectional_clstm: empty sequence or frame count " + std::to_string(seq.n()) +
                         " not divisible by batch " + std::to_string(batch));
    if (fwd.hidden != bwd.hidden) throw ShapeError("bidirectional_clstm: direction widths differ");
    const int steps = seq.n() / batch;
    const int ch = fwd.hidden;
    const int center = center_step(steps);

    std::vector<int> fwd_order, bwd_order;
    const int fwd_last = mode == SequenceMode::Center ? center : steps - 1;
    const int bwd_last = mode == SequenceMode::Center ? center : 0;
    for (int t = 0; t <= fwd_last; ++t) fwd_order.push_back(t);
    for (int t = steps - 1; t >= bwd_last; --t) bwd_order.push_back(t);

    const int out_frames = mode == SequenceMode::Center ? batch : batch * steps;
    Tensor<T> out(out_frames, 2 * ch, seq.h(), seq.w());
    const std::size_t block = static_cast<std::size_t>(ch) * seq.plane();

    auto place = [&](const Tensor<T>& h, int t, int half) {
        if (mode == SequenceMode::Center && t != center) return;
        for (int b = 0; b < batch; ++b) {
            const int frame = mode == SequenceMode::Center ? b : b * steps + t;
            std::copy(h.frame(b), h.frame(b) + block, out.frame(frame) + half * block);
        }
    };

    auto run = [&](const ConvLstmParams<T>& p, const std::vector<int>& order, int half,
                   std::vector<LstmStepCache<T>>* caches) {
        Tensor<T> h(batch, ch, seq.h(), seq.w());
        Tensor<T> c(batch, ch, seq.h(), seq.w());
        if (caches) caches->resize(order.size());
        for (std::size_t k = 0; k < order.size(); ++k) {
            const int t = order[k];
            Tensor<T> xt = gather_step(seq, batch, steps, t);
            LstmState<T> s = conv_lstm_step(xt, h, c, p, caches ? &(*caches)[k] : nullptr);
            h = std::move(s.h);
            c = std::move(s.c);
            place(h, t, half);
        }
    };

    run(fwd, fwd_order, 0, cache ? &cache->fwd : nullptr);
    run(bwd, bwd_order, 1, cache ? &cache->bwd : nullptr);
    if (cache) {
        cache->batch = batch;
        cache->steps = steps;
        cache->mode = mode;
        cache->fwd_order = std::move(fwd_order);
        cache->bwd_order = std::move(bwd_order);
    }
    return out;
}

template <typename T>
void bidirectional_clstm_backward(ConvLstmParams<T>& fwd, ConvLstmParams<T>& bwd, const BiLstmCache<T>& cache,
                                  const Tensor<T>& dout, Tensor<T>* dseq) {
    const int batch = cache.batch;
    const int steps = cache.steps;
    const int ch = fwd.hidden;
    const int center = center_step(steps);
    const std::size_t block = static_cast<std::size_t>(ch) * dout.plane();

    auto run = [&](ConvLstmParams<T>& p, const std::vector<int>& order, const std::vector<LstmStepCache<T>>& caches,
                   int half) {
        Tensor<T> dh_next(batch, ch, dout.h(), dout.w());
        Tensor<T> dc_next(batch, ch, dout.h(), dout.w());
        for (std::size_t k = order.size(); k-- > 0;) {
            const int t = order[k];
            Tensor<T> dh = dh_next;
            if (cache.mode == SequenceMode::PerStep || t == center) {
                for (int b = 0; b < batch; ++b) {
                    const int frame = cache.mode == SequenceMode::Center ? b : b * steps + t;
                    const T* src = dout.frame(frame) + half * block;
                    T* dst = dh.frame(b);
                    for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                }
            }
            const LstmStepCache<T>& sc = caches[k];
            Tensor<T> dx;
            if (dseq) dx = Tensor<T>(batch, p.input_channels, dout.h(), dout.w());
            Tensor<T> dh_prev, dc_prev;
            conv_lstm_step_backward(p, sc, dh, dc_next, dseq ? &dx : nullptr, dh_prev, dc_prev);
            if (dseq) {
                for (int b = 0; b < batch; ++b) {
                    T* dst = dseq->frame(b * steps + t);
                    const T* src = dx.frame(b);
                    for (std::size_t i = 0; i < dx.frame_size(); ++i) dst[i] += src[i];
                }
            }
            dh_next = std::move(dh_prev);
            dc_next = std::move(dc_prev);
        }
    };
    run(fwd, cache.fwd_order, cache.fwd, 0);
    run(bwd, cache.bwd_order, cache.bwd, 1);
}

// ---------------------------------------------------------------------------
// SEQ-UNET

template <typename T>
SeqUnet<T>::SeqUnet(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), params_(cfg) {
    Rng rng(seed);
    xavier_init(params_, rng);
}

template <typename T>
void SeqUnet<T>::forward(const Tensor<T>& x, int batch, SeqUnetCache<T>& k, const ForwardOptions& opt,
                         ShapeTrace* trace) const {
    const int steps = cfg_.seq_len;
    require_shape(x, Shape4{batch * steps, 1, cfg_.input_size, cfg_.input_size}, "SeqUnet input");
    const auto& p = params_;
    k.batch = batch;
    k.input = x;
    trace_push(trace, "Input Sequential Images", x.shape());

    k.e1a = conv_elu(x, p.enc[0][0]);
    k.e1 = conv_elu(k.e1a, p.enc[0][1]);
    trace_push(trace, "Encoding Block 1", k.e1.shape());
    maxpool2_forward(k.e1, k.p1, k.am1);
    trace_push(trace, "Pooling 1", k.p1.shape());
    k.e2a = conv_elu(k.p1, p.enc[1][0]);
    k.e2 = conv_elu(k.e2a, p.enc[1][1]);
    trace_push(trace, "Encoding Block 2", k.e2.shape());
    maxpool2_forward(k.e2, k.p2, k.am2);
    trace_push(trace, "Pooling 2", k.p2.shape());
    k.e3a = conv_elu(k.p2, p.enc[2][0]);
    k.e3 = conv_elu(k.e3a, p.enc[2][1]);
    trace_push(trace, "Encoding Block 3", k.e3.shape());
    maxpool2_forward(k.e3, k.p3, k.am3);
    trace_push(trace, "Pooling 3", k.p3.shape());

    k.bottleneck = bidirectional_clstm(k.p3, batch, p.bottleneck_fwd, p.bottleneck_bwd, SequenceMode::PerStep,
                                       &k.bottleneck_lstm);
    trace_push(trace, "Bidirectional C-LSTM 1", k.bottleneck.shape());
    if (opt.extractor_only) return;

    auto gate = [&](const Tensor<T>& skip, const Tensor<T>& g, int level) {
        if (opt.bypass_attention) {
            k.att[level].alpha = Tensor<T>();
            return skip;
        }
        return attention_gate(skip, g, p.att[level], &k.att[level]);
    };

    upsample2_forward(k.bottleneck, k.u1);
    trace_push(trace, "Upsampling 1", k.u1.shape());
    k.a3 = gate(k.e3, k.u1, 2);
    trace_push(trace, "Attention Block 3", k.a3.shape());
    concat_forward(k.u1, k.a3, k.cat1);
    trace_push(trace, "Concatenate 1", k.cat1.shape());
    k.d3a = conv_elu(k.cat1, p.dec3[0]);
    k.d3 = conv_elu(k.d3a, p.dec3[1]);
    trace_push(trace, "Decoding Block 3", k.d3.shape());

    upsample2_forward(k.d3, k.u2);
    trace_push(trace, "Upsampling 2", k.u2.shape());
    k.a2 = gate(k.e2, k.u2, 1);
    trace_push(trace, "Attention Block 2", k.a2.shape());
    concat_forward(k.u2, k.a2, k.cat2);
    trace_push(trace, "Concatenate 2", k.cat2.shape());
    k.d2a = conv_elu(k.cat2, p.dec2[0]);
    k.d2 = conv_elu(k.d2a, p.dec2[1]);
    trace_push(trace, "Decoding Block 2", k.d2.shape());

    upsample2_forward(k.d2, k.u3);
    trace_push(trace, "Upsampling 3", k.u3.shape());
    k.a1 = gate(k.e1, k.u3, 0);
    trace_push(trace, "Attention Block 1", k.a1.shape());
    concat_forward(k.u3, k.a1, k.cat3);
    trace_push(trace, "Concatenate 3", k.cat3.shape());
    k.d1 = conv_elu(k.cat3, p.dec1);
    trace_push(trace, "Decoding Block 1", k.d1.shape());

    k.lstm_out = bidirectional_clstm(k.d1, batch, p.output_fwd, p.output_bwd, SequenceMode::Center, &k.output_lstm);
    trace_push(trace, "Bidirectional C-LSTM 2", k.lstm_out.shape());
    sigmoid_forward(conv(k.lstm_out, p.head), k.prob);
    trace_push(trace, "Segmentation Output", k.prob.shape());
}

template <typename T>
void SeqUnet<T>::backward(SeqUnetCache<T>& k, const Tensor<T>& dprob, const Tensor<T>* dbottleneck,
                          bool extractor_grads) {
    auto& p = params_;
    require_shape(dprob, k.prob.shape(), "SeqUnet dprob");
    const bool bypass = k.att[0].alpha.empty();

    Tensor<T> dz = k.prob.like();
    sigmoid_backward(k.prob, dprob, dz);
    Tensor<T> dlstm = k.lstm_out.like();
    conv_back(k.lstm_out, p.head, dz, &dlstm);
    Tensor<T> dd1 = k.d1.like();
    bidirectional_clstm_backward(p.output_fwd, p.output_bwd, k.output_lstm, dlstm, &dd1);

    Tensor<T> de1 = k.e1.like(), de2 = k.e2.like(), de3 = k.e3.like();

    auto gate_back = [&](const Tensor<T>& skip, const Tensor<T>& g, int level, const Tensor<T>& dgated,
                         Tensor<T>& dskip, Tensor<T>& dg) {
        if (bypass) {
            if (extractor_grads) accumulate(dgated, dskip);
            return;
        }
        attention_gate_backward(skip, g, p.att[level], k.att[level], dgated, extractor_grads ? &dskip : nullptr, &dg);
    };

    // Decoder level 1
    Tensor<T> dcat3 = k.cat3.like();
    conv_elu_back(k.cat3, k.d1, p.dec1, dd1, &dcat3);
    Tensor<T> du3 = k.u3.like(), da1 = k.a1.like();
    concat_backward(dcat3, du3, da1);
    gate_back(k.e1, k.u3, 0, da1, de1, du3);
    Tensor<T> dd2 = k.d2.like();
    upsample2_backward(du3, dd2);

    // Decoder level 2
    Tensor<T> dd2a = k.d2a.like();
    conv_elu_back(k.d2a, k.d2, p.dec2[1], dd2, &dd2a);
    Tensor<T> dcat2 = k.cat2.like();
    conv_elu_back(k.cat2, k.d2a, p.dec2[0], dd2a, &dcat2);
    Tensor<T> du2 = k.u2.like(), da2 = k.a2.like();
    concat_backward(dcat2, du2, da2);
    gate_back(k.e2, k.u2, 1, da2, de2, du2);
    Tensor<T> dd3 = k.d3.like();
    upsample2_backward(du2, dd3);

    // Decoder level 3
    Tensor<T> dd3a = k.d3a.like();
    conv_elu_back(k.d3a, k.d3, p.dec3[1], dd3, &dd3a);
    Tensor<T> dcat1 = k.cat1.like();
    conv_elu_back(k.cat1, k.d3a, p.dec3[0], dd3a, &dcat1);
    Tensor<T> du1 = k.u1.like(), da3 = k.a3.like();
    concat_backward(dcat1, du1, da3);
    gate_back(k.e3, k.u1, 2, da3, de3, du1);

    if (!extractor_grads) return;

    Tensor<T> dbl = k.bottleneck.like();
    upsample2_backward(du1, dbl);
    if (dbottleneck) accumulate(*dbottleneck, dbl);

    Tensor<T> dp3 = k.p3.like();
    bidirectional_clstm_backward(p.bottleneck_fwd, p.bottleneck_bwd, k.bottleneck_lstm, dbl, &dp3);

    maxpool2_backward(dp3, k.am3, de3);
    Tensor<T> de3a = k.e3a.like();
    conv_elu_back(k.e3a, k.e3, p.enc[2][1], de3, &de3a);
    Tensor<T> dp2 = k.p2.like();
    conv_elu_back(k.p2, k.e3a, p.enc[2][0], de3a, &dp2);

    maxpool2_backward(dp2, k.am2, de2);
    Tensor<T> de2a = k.e2a.like();
    conv_elu_back(k.e2a, k.e2, p.enc[1][1], de2, &de2a);
    Tensor<T> dp1 = k.p1.like();
    conv_elu_back(k.p1, k.e2a, p.enc[1][0], de2a, &dp1);

    maxpool2_backward(dp1, k.am1, de1);
    Tensor<T> de1a = k.e1a.like();
    conv_elu_back(k.e1a, k.e1, p.enc[0][1], de1, &de1a);
    conv_elu_back(k.input, k.e1a, p.enc[0][0], de1a, static_cast<Tensor<T>*>(nullptr));
}

template <typename T>
void SeqUnet<T>::zero_grad() {
    params_.for_each([](const std::string&, ParamGroup, Weight<T>& w) { zero_weight_grads(w); });
}

template <typename T>
std::size_t SeqUnet<T>::parameter_count() const {
    std::size_t n = 0;
    params_.for_each([&n](const std::string&, ParamGroup, const Weight<T>& w) { n += w.value.size(); });
    return n;
}

// ---------------------------------------------------------------------------
// Discriminator

template <typename T>
Discriminator<T>::Discriminator(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), params_(cfg) {
    Rng rng(seed);
    xavier_init(params_, rng);
}

template <typename T>
void Discriminator<T>::forward(const Tensor<T>& bottleneck, int batch, DiscriminatorCache<T>& k,
                               ShapeTrace* trace) const {
    const auto& p = params_;
    if (bottleneck.c() != cfg_.disc_input_channels())
        throw ShapeError("discriminator: expected " + std::to_string(cfg_.disc_input_channels()) +
                         " feature channels, got " + std::to_string(bottleneck.c()));
    if (batch <= 0 || bottleneck.n() % batch != 0)
        throw ShapeError("discriminator: frame count not divisible by batch");
    const int steps = bottleneck.n() / batch;
    k.batch = batch;
    k.steps = steps;
    k.summed = Tensor<T>(batch, bottleneck.c(), bottleneck.h(), bottleneck.w());
    for (int b = 0; b < batch; ++b) {
        T* dst = k.summed.frame(b);
        for (int t = 0; t < steps; ++t) {
            const T* src = bottleneck.frame(b * steps + t);
            for (std::size_t i = 0; i < k.summed.frame_size(); ++i) dst[i] += src[i];
        }
    }
    trace_push(trace, "Summation 1", k.summed.shape());
    const T slope = static_cast<T>(leaky_slope);
    leaky_relu_forward(conv(k.summed, p.conv[0]), slope, k.c1);
    leaky_relu_forward(conv(k.c1, p.conv[1]), slope, k.c2);
    leaky_relu_forward(conv(k.c2, p.conv[2]), slope, k.c3);
    trace_push(trace, "Conv 1", k.c3.shape());
    Tensor<T> f1;
    linear_forward(k.c3, p.fc1.weight.value, p.fc1.bias_ptr(), f1);
    relu_forward(f1, k.f1);
    trace_push(trace, "FC 1", k.f1.shape());
    linear_forward(k.f1, p.fc2.weight.value, p.fc2.bias_ptr(), k.logits);
    trace_push(trace, "FC 2", k.logits.shape());
}

template <typename T>
void Discriminator<T>::backward(const DiscriminatorCache<T>& k, const Tensor<T>& dlogits, Tensor<T>* dbottleneck) {
    auto& p = params_;
    require_shape(dlogits, k.logits.shape(), "discriminator dlogits");
    const T slope = static_cast<T>(leaky_slope);

    Tensor<T> df1 = k.f1.like();
    linear_backward(k.f1, p.fc2.weight.value, dlogits, &df1, &p.fc2.weight.grad, p.fc2.bias_grad_ptr());
    Tensor<T> df1pre = k.f1.like();
    relu_backward(k.f1, df1, df1pre);
    Tensor<T> dc3 = k.c3.like();
    linear_backward(k.c3, p.fc1.weight.value, df1pre, &dc3, &p.fc1.weight.grad, p.fc1.bias_grad_ptr());

    Tensor<T> pre = k.c3.like();
    leaky_relu_backward(k.c3, slope, dc3, pre);
    Tensor<T> dc2 = k.c2.like();
    conv_back(k.c2, p.conv[2], pre, &dc2);
    pre = k.c2.like();
    leaky_relu_backward(k.c2, slope, dc2, pre);
    Tensor<T> dc1 = k.c1.like();
    conv_back(k.c1, p.conv[1], pre, &dc1);
    pre = k.c1.like();
    leaky_relu_backward(k.c1, slope, dc1, pre);
    Tensor<T> dsum = k.summed.like();
    conv_back(k.summed, p.conv[0], pre, dbottleneck ? &dsum : nullptr);

    if (dbottleneck) {
        for (int b = 0; b < k.batch; ++b) {
            const T* src = dsum.frame(b);
            for (int t = 0; t < k.steps; ++t) {
                T* dst = dbottleneck->frame(b * k.steps + t);
                for (std::size_t i = 0; i < dsum.frame_size(); ++i) dst[i] += src[i];
            }
        }
    }
}

template <typename T>
void Discriminator<T>::zero_grad() {
    params_.for_each([](const std::string&, ParamGroup, Weight<T>& w) { zero_weight_grads(w); });
}

// ---------------------------------------------------------------------------

#define ORBITSEG_INSTANTIATE(T)                                                                                    \
    template struct ConvParams<T>;                                                                                 \
    template struct AttentionGateParams<T>;                                                                        \
    template struct ConvLstmParams<T>;                                                                             \
    template struct SeqUnetParams<T>;                                                                              \
    template struct DiscriminatorParams<T>;                                                                        \
    template void xavier_init<T>(SeqUnetParams<T>&, Rng&);                                                         \
    template void xavier_init<T>(DiscriminatorParams<T>&, Rng&);                                                   \
    template Tensor<T> gather_step<T>(const Tensor<T>&, int, int, int);                                            \
    template Tensor<T> attention_gate<T>(const Tensor<T>&, const Tensor<T>&, const AttentionGateParams<T>&,        \
                                         AttentionCache<T>*);                                                      \
    template void attention_gate_backward<T>(const Tensor<T>&, const Tensor<T>&, AttentionGateParams<T>&,          \
                                             const AttentionCache<T>&, const Tensor<T>&, Tensor<T>*, Tensor<T>*);  \
    template LstmState<T> conv_lstm_step<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                  \
                                            const ConvLstmParams<T>&, LstmStepCache<T>*);                          \
    template void conv_lstm_step_backward<T>(ConvLstmParams<T>&, const LstmStepCache<T>&, const Tensor<T>&,        \
                                             const Tensor<T>&, Tensor<T>*, Tensor<T>&, Tensor<T>&);                \
    template Tensor<T> bidirectional_clstm<T>(const Tensor<T>&, int, const ConvLstmParams<T>&,                     \
                                              const ConvLstmParams<T>&, SequenceMode, BiLstmCache<T>*);            \
    template void bidirectional_clstm_backward<T>(ConvLstmParams<T>&, ConvLstmParams<T>&, const BiLstmCache<T>&,   \
                                                  const Tensor<T>&, Tensor<T>*);                                   \
    template class SeqUnet<T>;                                                                                     \
    template class Discriminator<T>;

ORBITSEG_INSTANTIATE(float)
ORBITSEG_INSTANTIATE(double)

#undef ORBITSEG_INSTANTIATE

}  // namespace orbitseg
