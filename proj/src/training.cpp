#include "orbitseg/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "orbitseg/errors.hpp"
#include "orbitseg/random.hpp"

namespace orbitseg {

void TrainConfig::validate() const {
    if (epochs < 0) throw std::invalid_argument("epochs must be non-negative");
    if (!(lr_seg > 0) || !(lr_disc > 0)) throw std::invalid_argument("learning rates must be positive");
    if (!(adam_beta1 > 0 && adam_beta1 < 1) || !(adam_beta2 > 0 && adam_beta2 < 1))
        throw std::invalid_argument("adam betas must lie in (0,1)");
    if (batch < 1) throw std::invalid_argument("batch size must be at least 1");
    loss.validate();
}

void RunLog::record(const EpochRecord& r, bool adversarial) {
    records_.push_back(r);
    if (!sink_) return;
    std::ostringstream line;
    line.precision(9);
    line << "run=" << tag_ << " epoch=" << r.epoch << " loss=" << r.loss << " dice=" << r.dice;
    if (adversarial) line << " disc_loss=" << r.disc_loss << " adv_loss=" << r.adv_loss;
    line << " lr_seg=" << r.lr_seg;
    if (adversarial) line << " lr_disc=" << r.lr_disc;
    *sink_ << line.str() << '\n';
    sink_->flush();
}

void RunLog::note(const std::string& line) {
    if (sink_) *sink_ << "run=" << tag_ << ' ' << line << '\n';
}

// ---------------------------------------------------------------------------
// Folds

FoldSplit make_folds(const std::vector<std::string>& subjects, int k, std::uint64_t seed) {
    if (k < 1) throw std::invalid_argument("fold count must be at least 1");
    if (static_cast<std::size_t>(k) > subjects.size())
        throw std::invalid_argument("fold count " + std::to_string(k) + " exceeds subject count " +
                                    std::to_string(subjects.size()));
    std::vector<std::string> order = subjects;
    if (std::set<std::string>(order.begin(), order.end()).size() != order.size())
        throw std::invalid_argument("subject ids must be unique");
    Rng rng(seed);
    rng.shuffle(order);
    FoldSplit split;
    split.k = k;
    split.test.resize(k);
    split.train.resize(k);
    for (std::size_t i = 0; i < order.size(); ++i) split.test[i % k].push_back(order[i]);
    for (int f = 0; f < k; ++f) {
        if (k == 1) {
            split.train[f] = split.test[f];
            continue;
        }
        for (int g = 0; g < k; ++g)
            if (g != f) split.train[f].insert(split.train[f].end(), split.test[g].begin(), split.test[g].end());
    }
    return split;
}

FoldSplit make_folds(const DatasetManifest& manifest, int k, std::uint64_t seed) {
    std::vector<std::string> ids;
    for (const auto& e : manifest.entries) ids.push_back(e.subject);
    return make_folds(ids, k, seed);
}

// ---------------------------------------------------------------------------
// Batching

namespace {

void check_sequences(const std::vector<SliceSequence>& seqs, const ModelConfig& m, const char* what) {
    for (const auto& s : seqs)
        if (s.seq_len != m.seq_len || s.height != m.input_size || s.width != m.input_size)
            throw ShapeError(std::string(what) + ": sequence of subject '" + s.subject + "' is " +
                             std::to_string(s.seq_len) + "x" + std::to_string(s.height) + "x" +
                             std::to_string(s.width) + ", model expects " + std::to_string(m.seq_len) + "x" +
                             std::to_string(m.input_size) + "x" + std::to_string(m.input_size));
}

std::vector<const SliceSequence*> usable(const std::vector<SliceSequence>& seqs, bool foreground_only,
                                         const char* what) {
    std::vector<const SliceSequence*> out;
    for (const auto& s : seqs)
        if (!foreground_only || s.foreground() > 0) out.push_back(&s);
    if (out.empty())
        throw DataError(std::string(what) + (foreground_only ? ": no sequences with foreground" : ": no sequences"));
    return out;
}

struct Batch {
    Tensor<float> x;  // (B * T) x 1 x H x W
    Tensor<float> m;  // B x 1 x H x W
    int size = 0;
};

Batch make_batch(const std::vector<const SliceSequence*>& data, const std::vector<std::size_t>& idx, std::size_t from,
                 std::size_t to, const ModelConfig& mc) {
    Batch b;
    b.size = static_cast<int>(to - from);
    b.x = Tensor<float>(b.size * mc.seq_len, 1, mc.input_size, mc.input_size);
    b.m = Tensor<float>(b.size, 1, mc.input_size, mc.input_size);
    for (std::size_t i = from; i < to; ++i) {
        const SliceSequence& s = *data[idx[i]];
        const int j = static_cast<int>(i - from);
        std::copy(s.slices.begin(), s.slices.end(), b.x.frame(j * mc.seq_len));
        std::copy(s.mask.begin(), s.mask.end(), b.m.frame(j));
    }
    return b;
}

std::vector<std::size_t> iota_vec(std::size_t n) {
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = i;
    return v;
}

void require_finite(double v, const std::string& what, int epoch) {
    if (!std::isfinite(v))
        throw DivergenceError(what + " became non-finite in epoch " + std::to_string(epoch));
}

std::span<const float> frame_span(const Tensor<float>& t, int n) { return {t.frame(n), t.frame_size()}; }
std::span<float> frame_span(Tensor<float>& t, int n) { return {t.frame(n), t.frame_size()}; }

AdamConfig seg_adam(const TrainConfig& c) { return {c.lr_seg, c.adam_beta1, c.adam_beta2, c.adam_eps}; }
AdamConfig disc_adam(const TrainConfig& c) { return {c.lr_disc, c.adam_beta1, c.adam_beta2, c.adam_eps}; }

// Lowest-loss snapshot of a network and its optimizers.
struct BestSnapshot {
    double loss = std::numeric_limits<double>::infinity();
    int epoch = 0;
    SeqUnetParams<float> net;
    std::optional<DiscriminatorParams<float>> disc;
    std::vector<OptimizerState> opts;
};

Checkpoint finish_checkpoint(const ModelConfig& mc, const SeqUnet<float>& net, const BestSnapshot& best,
                             const std::string& method) {
    Checkpoint ck;
    ck.model = mc;
    ck.net = net;
    if (best.epoch > 0) ck.net.params() = best.net;
    ck.method = method;
    ck.epoch = best.epoch;
    ck.loss = best.epoch > 0 ? best.loss : 0.0;
    ck.optimizers = best.opts;
    return ck;
}

// Supervised loop shared by pretraining, fine-tuning and scratch training.
Checkpoint supervised(SeqUnet<float> net, const std::vector<SliceSequence>& seqs, const TrainConfig& cfg,
                      const std::function<bool(ParamGroup)>& trainable, const std::string& method, RunLog* log) {
    cfg.validate();
    const ModelConfig mc = net.config();
    check_sequences(seqs, mc, method.c_str());
    const auto data = usable(seqs, cfg.foreground_only, method.c_str());
    Adam<float> opt(seg_adam(cfg));
    opt.add_all(net.params(), trainable);
    const bool extractor_grads = trainable(ParamGroup::Encoder) || trainable(ParamGroup::Bottleneck);

    Rng rng(cfg.seed);
    std::vector<std::size_t> order = iota_vec(data.size());
    BestSnapshot best;
    SeqUnetCache<float> cache;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0, dice_sum = 0;
        for (std::size_t from = 0; from < order.size(); from += cfg.batch) {
            const std::size_t to = std::min(order.size(), from + static_cast<std::size_t>(cfg.batch));
            const Batch b = make_batch(data, order, from, to, mc);
            net.forward(b.x, b.size, cache);
            Tensor<float> dprob = cache.prob.like();
            const float scale = 1.0f / static_cast<float>(b.size);
            for (int i = 0; i < b.size; ++i) {
                const auto y = frame_span(cache.prob, i);
                const auto m = frame_span(b.m, i);
                const float l = pretrain_loss<float>(y, m, cfg.loss, scale, frame_span(dprob, i));
                require_finite(l, "training loss", epoch);
                loss_sum += l;
                dice_sum += soft_dice<float>(y, m, static_cast<float>(cfg.loss.dice_epsilon));
            }
            net.zero_grad();
            net.backward(cache, dprob, nullptr, extractor_grads);
            opt.step();
        }
        EpochRecord r;
        r.epoch = epoch;
        r.loss = loss_sum / static_cast<double>(data.size());
        r.dice = dice_sum / static_cast<double>(data.size());
        r.lr_seg = cfg.lr_seg;
        if (log) log->record(r, false);
        if (r.loss < best.loss) {
            best.loss = r.loss;
            best.epoch = epoch;
            best.net = net.params();
            best.opts = {OptimizerState::capture("seg", opt)};
        }
    }
    return finish_checkpoint(mc, net, best, method);
}

}  // namespace

Checkpoint pretrain_source(const std::vector<SliceSequence>& source, const ModelConfig& model,
                           const TrainConfig& cfg, RunLog* log) {
    if (source.empty()) throw DataError("pretrain_source: empty source set");
    model.validate();
    return supervised(SeqUnet<float>(model, cfg.seed), source, cfg, [](ParamGroup) { return true; }, "pretrain", log);
}

Checkpoint train_scratch(const std::vector<SliceSequence>& target, const ModelConfig& model, const TrainConfig& cfg,
                         RunLog* log) {
    if (target.empty()) throw DataError("train_scratch: empty target set");
    model.validate();
    return supervised(SeqUnet<float>(model, cfg.seed), target, cfg, [](ParamGroup) { return true; }, "scratch", log);
}

Checkpoint finetune_transfer(const Checkpoint& pretrained, const std::vector<SliceSequence>& target,
                             const TrainConfig& cfg, RunLog* log) {
    if (target.empty()) throw DataError("finetune_transfer: empty target set");
    return supervised(pretrained.net, target, cfg, [](ParamGroup g) { return !in_extractor(g); }, "finetune", log);
}

// ---------------------------------------------------------------------------
// Adversarial adaptation

namespace {

// Bottleneck features of the frozen source extractor, computed once per
// sequence: the extractor never changes, so caching is exact.
class SourceFeatures {
public:
    SourceFeatures(const SeqUnet<float>& frozen, const std::vector<const SliceSequence*>& data, int chunk)
        : frozen_(frozen), data_(data), chunk_(chunk) {
        const ModelConfig& mc = frozen.config();
        const std::size_t per = static_cast<std::size_t>(mc.seq_len) * mc.disc_input_channels() *
                                mc.bottleneck_size() * mc.bottleneck_size();
        constexpr std::size_t budget = std::size_t{1} << 28;  // floats (1 GiB)
        cache_enabled_ = per * data.size() <= budget;
        if (cache_enabled_) cache_.resize(data.size());
    }

    // (batch * T) x C x h x w for the given source indices.
    Tensor<float> gather(const std::vector<std::size_t>& idx) {
        const ModelConfig& mc = frozen_.config();
        const int steps = mc.seq_len;
        const int n = static_cast<int>(idx.size());
        Tensor<float> out(n * steps, mc.disc_input_channels(), mc.bottleneck_size(), mc.bottleneck_size());
        std::vector<std::size_t> missing;
        for (std::size_t i : idx)
            if (!cache_enabled_ || cache_[i].empty()) missing.push_back(i);
        std::sort(missing.begin(), missing.end());
        missing.erase(std::unique(missing.begin(), missing.end()), missing.end());
        std::map<std::size_t, Tensor<float>> fresh;
        for (std::size_t from = 0; from < missing.size(); from += chunk_) {
            const std::size_t to = std::min(missing.size(), from + static_cast<std::size_t>(chunk_));
            const Batch b = make_batch(data_, missing, from, to, mc);
            frozen_.forward(b.x, b.size, k_, {.extractor_only = true});
            for (int j = 0; j < b.size; ++j) {
                Tensor<float> t(steps, k_.bottleneck.c(), k_.bottleneck.h(), k_.bottleneck.w());
                std::copy_n(k_.bottleneck.frame(j * steps), t.size(), t.data());
                const std::size_t id = missing[from + j];
                if (cache_enabled_) cache_[id] = std::move(t);
                else fresh[id] = std::move(t);
            }
        }
        for (int j = 0; j < n; ++j) {
            const Tensor<float>& t = cache_enabled_ ? cache_[idx[j]] : fresh.at(idx[j]);
            std::copy_n(t.data(), t.size(), out.frame(j * steps));
        }
        return out;
    }

private:
    const SeqUnet<float>& frozen_;
    const std::vector<const SliceSequence*>& data_;
    int chunk_;
    bool cache_enabled_ = false;
    std::vector<Tensor<float>> cache_;
    SeqUnetCache<float> k_;
};

}  // namespace

Checkpoint adapt_domain(const Checkpoint& pretrained, const std::vector<SliceSequence>& source,
                        const std::vector<SliceSequence>& target, const TrainConfig& cfg, RunLog* log) {
    cfg.validate();
    if (source.empty()) throw DataError("adapt_domain: empty source set");
    if (target.empty()) throw DataError("adapt_domain: empty target set");
    const ModelConfig mc = pretrained.model;
    check_sequences(source, mc, "adapt_domain source");
    check_sequences(target, mc, "adapt_domain target");
    const auto src = usable(source, cfg.foreground_only, "adapt_domain source");
    const auto tgt = usable(target, cfg.foreground_only, "adapt_domain target");

    const SeqUnet<float> frozen = pretrained.net;  // source extractor; never updated
    SeqUnet<float> net = pretrained.net;           // target network
    Discriminator<float> disc(mc, cfg.seed ^ 0x9e3779b97f4a7c15ull);

    Adam<float> opt_seg(seg_adam(cfg));
    opt_seg.add_all(net.params(), [](ParamGroup) { return true; });
    Adam<float> opt_disc(disc_adam(cfg));
    opt_disc.add_all(disc.params());
    require_disjoint(opt_seg, opt_disc);
    for (const auto& s : opt_seg.slots())
        if (s.group == ParamGroup::Discriminator) throw std::logic_error("segmentation optimizer owns discriminator weights");

    SourceFeatures features(frozen, src, cfg.batch);
    Rng rng(cfg.seed);
    std::vector<std::size_t> order = iota_vec(tgt.size());
    std::vector<std::size_t> src_order = iota_vec(src.size());
    rng.shuffle(src_order);
    std::size_t src_pos = 0;
    auto next_source = [&](int n) {
        std::vector<std::size_t> idx;
        for (int i = 0; i < n; ++i) {
            if (src_pos == src_order.size()) {
                rng.shuffle(src_order);
                src_pos = 0;
            }
            idx.push_back(src_order[src_pos++]);
        }
        return idx;
    };

    const float eps = static_cast<float>(cfg.loss.dice_epsilon);
    BestSnapshot best;
    SeqUnetCache<float> cache;
    DiscriminatorCache<float> dsrc, dtgt;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0, dice_sum = 0, disc_sum = 0, adv_sum = 0;
        std::size_t disc_batches = 0;
        for (std::size_t from = 0; from < order.size(); from += cfg.batch) {
            const std::size_t to = std::min(order.size(), from + static_cast<std::size_t>(cfg.batch));
            const Batch b = make_batch(tgt, order, from, to, mc);
            const float scale = 1.0f / static_cast<float>(b.size);

            // (a) discriminator step: source features labelled source, target features labelled target.
            net.forward(b.x, b.size, cache);
            const Tensor<float> fsrc = features.gather(next_source(b.size));
            disc.forward(fsrc, b.size, dsrc);
            disc.forward(cache.bottleneck, b.size, dtgt);
            Tensor<float> dls = dsrc.logits.like(), dlt = dtgt.logits.like();
            double dl = 0;
            for (int i = 0; i < b.size; ++i)
                dl += discriminator_loss<float>(dsrc.logits.frame(i), dtgt.logits.frame(i), scale, dls.frame(i),
                                                dlt.frame(i));
            dl /= b.size;
            require_finite(dl, "discriminator loss", epoch);
            disc.zero_grad();
            disc.backward(dsrc, dls, nullptr);
            disc.backward(dtgt, dlt, nullptr);
            opt_disc.step();
            disc_sum += dl;
            ++disc_batches;

            // (b) segmentation step against the updated discriminator. The
            // network has not changed since the forward pass above.
            disc.forward(cache.bottleneck, b.size, dtgt);
            Tensor<float> dlog = dtgt.logits.like();
            Tensor<float> dprob = cache.prob.like();
            for (int i = 0; i < b.size; ++i) {
                const auto y = frame_span(cache.prob, i);
                const auto m = frame_span(b.m, i);
                const float l = segmentation_da_loss<float>(dtgt.logits.frame(i), y, m, cfg.loss, scale,
                                                            dlog.frame(i), frame_span(dprob, i));
                require_finite(l, "segmentation loss", epoch);
                loss_sum += l;
                adv_sum += softmax_cross_entropy<float>(dtgt.logits.frame(i), kSourceLabel);
                dice_sum += soft_dice<float>(y, m, eps);
            }
            Tensor<float> dfeat = cache.bottleneck.like();
            disc.backward(dtgt, dlog, &dfeat);  // discriminator grads discarded at the next zero_grad
            net.zero_grad();
            net.backward(cache, dprob, &dfeat);
            opt_seg.step();
        }
        EpochRecord r;
        r.epoch = epoch;
        r.loss = loss_sum / static_cast<double>(tgt.size());
        r.dice = dice_sum / static_cast<double>(tgt.size());
        r.adv_loss = adv_sum / static_cast<double>(tgt.size());
        r.disc_loss = disc_sum / static_cast<double>(disc_batches);
        r.lr_seg = cfg.lr_seg;
        r.lr_disc = cfg.lr_disc;
        if (log) log->record(r, true);
        // The adversarial term depends on a moving discriminator, so epochs
        // are ranked by the segmentation term alone.
        const double seg = r.loss - r.adv_loss;
        if (seg < best.loss) {
            best.loss = seg;
            best.epoch = epoch;
            best.net = net.params();
            best.disc = disc.params();
            best.opts = {OptimizerState::capture("seg", opt_seg), OptimizerState::capture("disc", opt_disc)};
        }
    }
    Checkpoint ck = finish_checkpoint(mc, net, best, "adapt");
    ck.disc = disc;
    if (best.disc) ck.disc->params() = *best.disc;
    return ck;
}

// ---------------------------------------------------------------------------
// Prediction and evaluation

Prediction predict_volume(const SeqUnet<float>& net, const CtVolume& volume, int batch) {
    const ModelConfig& mc = net.config();
    if (volume.height() != mc.input_size || volume.width() != mc.input_size)
        throw ShapeError("predict_volume: slices are " + std::to_string(volume.height()) + "x" +
                         std::to_string(volume.width()) + ", model expects " + std::to_string(mc.input_size) + "x" +
                         std::to_string(mc.input_size));
    if (volume.stage != Stage::Normalized) throw DataError("predict_volume expects a NORMALIZED volume");
    if (batch < 1) throw std::invalid_argument("batch size must be at least 1");
    const SegmentationMask none(volume.dims, volume.spacing);
    const auto seqs = bind_sequences(volume, none, {}, mc.seq_len);
    std::vector<const SliceSequence*> data;
    for (const auto& s : seqs) data.push_back(&s);
    const auto idx = iota_vec(data.size());

    Prediction p;
    p.prob = CtVolume(volume.dims, volume.spacing, Stage::Normalized);
    SeqUnetCache<float> cache;
    for (std::size_t from = 0; from < data.size(); from += batch) {
        const std::size_t to = std::min(data.size(), from + static_cast<std::size_t>(batch));
        const Batch b = make_batch(data, idx, from, to, mc);
        net.forward(b.x, b.size, cache);
        for (int j = 0; j < b.size; ++j)
            std::copy_n(cache.prob.frame(j), volume.dims.slice(), p.prob.slice(static_cast<int>(from) + j));
    }
    p.mask = SegmentationMask(volume.dims, volume.spacing);
    p.mask.voxels = binarize(p.prob.voxels);
    return p;
}

std::vector<SliceSequence> sequences_of(const std::vector<PreprocessedCase>& cases, int seq_len) {
    std::vector<SliceSequence> out;
    for (const auto& c : cases) {
        auto s = bind_sequences(c.volume, c.mask, c.name(), seq_len);
        out.insert(out.end(), std::make_move_iterator(s.begin()), std::make_move_iterator(s.end()));
    }
    return out;
}

Method parse_method(const std::string& name) {
    if (name == "scratch") return Method::Scratch;
    if (name == "tr") return Method::Transfer;
    if (name == "da") return Method::Adapt;
    throw std::invalid_argument("unknown mode '" + name + "' (expected scratch, tr or da)");
}

const char* method_name(Method m) {
    switch (m) {
        case Method::Scratch: return "SEQ-UNET";
        case Method::Transfer: return "SEQ-UNET+TR";
        case Method::Adapt: return "SEQ-UNET+DA";
    }
    return "?";
}

void score_cases(const SeqUnet<float>& net, const std::vector<PreprocessedCase>& cases, int fold, int batch,
                 CvResult& into) {
    if (cases.empty()) throw DataError("no cases to score");
    ConfusionCounts pooled;
    double dice_sum = 0, vs_sum = 0;
    for (const auto& c : cases) {
        const Prediction p = predict_volume(net, c.volume, batch);
        SubjectResult s;
        s.fold = fold;
        s.subject = c.name();
        s.counts = confusion(p.mask.voxels, c.mask.voxels);
        s.dice = dice_score(s.counts).value;
        s.vs = volume_similarity(s.counts).value;
        pooled += s.counts;
        dice_sum += s.dice;
        vs_sum += s.vs;
        into.subjects.push_back(s);
    }
    const double n = static_cast<double>(cases.size());
    into.report.dice.push_back(dice_sum / n);
    into.report.vs.push_back(vs_sum / n);
    into.report.sensitivity.push_back(sensitivity(pooled).value);
    into.report.specificity.push_back(specificity(pooled).value);
}

CvResult cross_validate(Method method, const std::vector<PreprocessedCase>& cases, const FoldSplit& split,
                        const ModelConfig& model, const TrainConfig& cfg, const Checkpoint* pretrained,
                        const std::vector<SliceSequence>& source, RunLog* log) {
    if (method != Method::Scratch && !pretrained)
        throw std::invalid_argument(std::string(method_name(method)) + " needs a pretrained checkpoint");
    if (method == Method::Adapt && source.empty()) throw std::invalid_argument("adaptation needs source data");
    if (pretrained && !(pretrained->model == model))
        throw ConfigMismatchError("pretrained checkpoint was built for a different model configuration");
    CvResult out;
    const std::string base_tag = log ? log->tag() : std::string();
    for (int f = 0; f < split.k; ++f) {
        const std::set<std::string> train_ids(split.train[f].begin(), split.train[f].end());
        const std::set<std::string> test_ids(split.test[f].begin(), split.test[f].end());
        std::vector<PreprocessedCase> train, test;
        for (const auto& c : cases) {
            if (train_ids.count(c.subject)) train.push_back(c);
            if (test_ids.count(c.subject)) test.push_back(c);
        }
        if (train.empty() || test.empty())
            throw DataError("fold " + std::to_string(f + 1) + " has no training or no test cases");
        const auto seqs = sequences_of(train, model.seq_len);
        if (log) log->set_tag(base_tag + (base_tag.empty() ? "" : ".") + "fold" + std::to_string(f + 1));
        Checkpoint ck;
        switch (method) {
            case Method::Scratch: ck = train_scratch(seqs, model, cfg, log); break;
            case Method::Transfer: ck = finetune_transfer(*pretrained, seqs, cfg, log); break;
            case Method::Adapt: ck = adapt_domain(*pretrained, source, seqs, cfg, log); break;
        }
        score_cases(ck.net, test, f, cfg.batch, out);
        out.models.push_back(std::move(ck));
    }
    if (log) log->set_tag(base_tag);
    return out;
}

}  // namespace orbitseg
