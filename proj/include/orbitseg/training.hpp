#pragma once

// Training loops for the four regimes (source pretraining, adversarial
// adaptation, partial fine-tuning, training from scratch), prediction, and
// the subject-level cross-validation harness.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "orbitseg/checkpoint.hpp"
#include "orbitseg/losses.hpp"
#include "orbitseg/metrics.hpp"
#include "orbitseg/preprocess.hpp"
#include "orbitseg/volume.hpp"

namespace orbitseg {

struct TrainConfig {
    int epochs = 500;
    double lr_seg = 5e-5;
    double lr_disc = 1e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.9999;
    double adam_eps = 1e-8;
    int batch = 8;
    std::uint64_t seed = 1;
    LossConfig loss;
    // Train only on sequences whose centre slice contains foreground.
    bool foreground_only = true;

    void validate() const;
};

struct EpochRecord {
    int epoch = 0;
    double loss = 0.0;       // objective minimized by the segmentation optimizer
    double dice = 0.0;       // mean soft dice over the epoch's samples
    double disc_loss = 0.0;  // adaptation only
    double adv_loss = 0.0;   // adaptation only
    double lr_seg = 0.0;
    double lr_disc = 0.0;
};

// Collects per-epoch records and optionally streams them as
// `run=<tag> epoch=<n> key=value ...` lines.
class RunLog {
public:
    RunLog() = default;
    explicit RunLog(std::ostream* sink) : sink_(sink) {}

    void set_tag(std::string tag) { tag_ = std::move(tag); }
    const std::string& tag() const { return tag_; }
    void record(const EpochRecord& r, bool adversarial);
    void note(const std::string& line);
    const std::vector<EpochRecord>& records() const { return records_; }
    void clear() { records_.clear(); }

private:
    std::ostream* sink_ = nullptr;
    std::string tag_ = "run";
    std::vector<EpochRecord> records_;
};

struct FoldSplit {
    int k = 0;
    std::vector<std::vector<std::string>> test;   // per fold
    std::vector<std::vector<std::string>> train;  // per fold, complement of test
};

// Subject-level shuffled partition with fold sizes differing by at most one.
// k == 1 trains and tests on every subject.
FoldSplit make_folds(const std::vector<std::string>& subjects, int k, std::uint64_t seed);
FoldSplit make_folds(const DatasetManifest& manifest, int k, std::uint64_t seed);

// All returned checkpoints hold the weights of the epoch with the lowest
// training loss (the initial weights when epochs == 0).
Checkpoint pretrain_source(const std::vector<SliceSequence>& source, const ModelConfig& model,
                           const TrainConfig& cfg, RunLog* log = nullptr);

Checkpoint adapt_domain(const Checkpoint& pretrained, const std::vector<SliceSequence>& source,
                        const std::vector<SliceSequence>& target, const TrainConfig& cfg, RunLog* log = nullptr);

Checkpoint finetune_transfer(const Checkpoint& pretrained, const std::vector<SliceSequence>& target,
                             const TrainConfig& cfg, RunLog* log = nullptr);

Checkpoint train_scratch(const std::vector<SliceSequence>& target, const ModelConfig& model, const TrainConfig& cfg,
                         RunLog* log = nullptr);

struct Prediction {
    CtVolume prob;  // centre-slice probabilities, one slice per input slice
    SegmentationMask mask;
};

Prediction predict_volume(const SeqUnet<float>& net, const CtVolume& volume, int batch = 8);
inline Prediction predict_volume(const Checkpoint& ckpt, const CtVolume& volume, int batch = 8) {
    return predict_volume(ckpt.net, volume, batch);
}

// Flattens the sequences of several cases.
std::vector<SliceSequence> sequences_of(const std::vector<PreprocessedCase>& cases, int seq_len = 3);

enum class Method { Scratch, Transfer, Adapt };

Method parse_method(const std::string& name);  // scratch, tr, da
const char* method_name(Method m);              // SEQ-UNET, SEQ-UNET+TR, SEQ-UNET+DA

struct SubjectResult {
    int fold = 0;
    std::string subject;
    ConfusionCounts counts;
    double dice = 0.0;
    double vs = 0.0;
};

struct CvResult {
    FoldReport report;
    std::vector<SubjectResult> subjects;
    std::vector<Checkpoint> models;  // one per fold
};

// Trains `method` once per fold on the fold's training subjects and scores the
// held-out subjects. `pretrained` is required for Transfer and Adapt, and
// `source` for Adapt.
CvResult cross_validate(Method method, const std::vector<PreprocessedCase>& cases, const FoldSplit& split,
                        const ModelConfig& model, const TrainConfig& cfg, const Checkpoint* pretrained,
                        const std::vector<SliceSequence>& source, RunLog* log = nullptr);

// Scores trained model(s) on held-out cases: per-subject metrics plus one
// FoldReport entry (subject-mean dice/VS, pooled sensitivity/specificity).
void score_cases(const SeqUnet<float>& net, const std::vector<PreprocessedCase>& cases, int fold, int batch,
                 CvResult& into);

}  // namespace orbitseg
