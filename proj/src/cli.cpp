#include "orbitseg/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "orbitseg/checkpoint.hpp"
#include "orbitseg/errors.hpp"
#include "orbitseg/overlay.hpp"
#include "orbitseg/preprocess.hpp"
#include "orbitseg/report.hpp"
#include "orbitseg/synthdata.hpp"
#include "orbitseg/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace orbitseg {

namespace {

struct Options {
    std::string manifest;
    std::string source_manifest;
    std::string test_manifest;
    std::string pred_manifest;
    std::string recipe = "synth";
    std::string modes;
    std::string out = "out";
    std::string seeds;
    std::string pretrained;
    std::string checkpoint;
    std::string config;
    std::string dataset;
    std::vector<std::string> inputs;
    int folds = 1;

    std::optional<int> epochs, batch, input_size, width_divisor;
    std::optional<double> lambda_seg, lr_seg, lr_disc;
    std::optional<bool> foreground_only;

    // synth
    int n_source = 40, n_target = 4, n_test = 0;
    int depth = 16, height = 64, width = 64;
};

// TrainConfig and architecture after applying the config file and then flags.
struct Settings {
    TrainConfig train;
    int width_divisor = 1;
    std::optional<int> input_size;
    std::vector<std::uint64_t> seeds{1};
};

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok.empty()) continue;
        std::size_t used = 0;
        unsigned long long v = 0;
        try {
            v = std::stoull(tok, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != tok.size()) throw std::invalid_argument("invalid seed '" + tok + "'");
        out.push_back(v);
    }
    if (out.empty()) throw std::invalid_argument("empty seed list");
    return out;
}

Settings resolve(const Options& o) {
    Settings s;
    if (!o.config.empty()) {
        std::ifstream in(o.config);
        if (!in) throw IoError("cannot open config: " + o.config);
        json j;
        try {
            j = json::parse(in);
        } catch (const json::exception& e) {
            throw FormatError(o.config + ": " + e.what());
        }
        static const char* known[] = {"epochs",      "lr_seg",     "lr_disc",      "adam_beta1",
                                      "adam_beta2",  "adam_eps",   "batch",        "seed",
                                      "lambda_seg",  "dice_epsilon", "foreground_ratio_cap", "foreground_only",
                                      "input_size",  "width_divisor"};
        for (const auto& [key, _] : j.items())
            if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return key == k; }) ==
                std::end(known))
                throw FormatError(o.config + ": unknown key '" + key + "'");
        try {
            auto& t = s.train;
            t.epochs = j.value("epochs", t.epochs);
            t.lr_seg = j.value("lr_seg", t.lr_seg);
            t.lr_disc = j.value("lr_disc", t.lr_disc);
            t.adam_beta1 = j.value("adam_beta1", t.adam_beta1);
            t.adam_beta2 = j.value("adam_beta2", t.adam_beta2);
            t.adam_eps = j.value("adam_eps", t.adam_eps);
            t.batch = j.value("batch", t.batch);
            t.seed = j.value("seed", t.seed);
            s.seeds = {t.seed};
            t.loss.lambda_seg = j.value("lambda_seg", t.loss.lambda_seg);
            t.loss.dice_epsilon = j.value("dice_epsilon", t.loss.dice_epsilon);
            t.loss.foreground_ratio_cap = j.value("foreground_ratio_cap", t.loss.foreground_ratio_cap);
            t.foreground_only = j.value("foreground_only", t.foreground_only);
            if (j.contains("input_size")) s.input_size = j["input_size"].get<int>();
            s.width_divisor = j.value("width_divisor", s.width_divisor);
        } catch (const json::exception& e) {
            throw FormatError(o.config + ": " + e.what());
        }
    }
    auto& t = s.train;
    if (o.epochs) t.epochs = *o.epochs;
    if (o.batch) t.batch = *o.batch;
    if (o.lambda_seg) t.loss.lambda_seg = *o.lambda_seg;
    if (o.lr_seg) t.lr_seg = *o.lr_seg;
    if (o.lr_disc) t.lr_disc = *o.lr_disc;
    if (o.foreground_only) t.foreground_only = *o.foreground_only;
    if (o.width_divisor) s.width_divisor = *o.width_divisor;
    if (o.input_size) s.input_size = *o.input_size;
    if (!o.seeds.empty()) s.seeds = parse_seeds(o.seeds);
    t.seed = s.seeds.front();
    t.validate();
    return s;
}

void require(const std::string& value, const char* flag) {
    if (value.empty()) throw std::invalid_argument(std::string("missing required flag ") + flag);
}

fs::path ensure_dir(const fs::path& p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw IoError("cannot create directory " + p.string() + ": " + ec.message());
    return p;
}

// Processed (NORMALIZED) cases listed in a manifest.
std::vector<PreprocessedCase> load_cases(const std::string& manifest_path) {
    const DatasetManifest m = load_manifest(manifest_path);
    std::vector<PreprocessedCase> out;
    for (const auto& e : m.entries) {
        PreprocessedCase c;
        c.subject = e.subject;
        c.volume = load_volume(e.volume);
        c.mask = load_mask(e.mask);
        if (c.volume.stage != Stage::Normalized)
            throw DataError("subject '" + e.subject + "' is " + stage_name(c.volume.stage) +
                            "; run `orbitseg preprocess` first");
        out.push_back(std::move(c));
    }
    if (out.empty()) throw DataError(manifest_path + ": manifest lists no subjects");
    return out;
}

ModelConfig model_for(const Settings& s, const std::vector<PreprocessedCase>& cases) {
    ModelConfig mc;
    mc.width_divisor = s.width_divisor;
    const int h = cases.front().volume.height();
    for (const auto& c : cases)
        if (c.volume.height() != h || c.volume.width() != h)
            throw ShapeError("subject '" + c.name() + "' slices are " + std::to_string(c.volume.height()) + "x" +
                             std::to_string(c.volume.width()) + "; all slices must be square and equal in size");
    mc.input_size = s.input_size.value_or(h);
    if (mc.input_size != h)
        throw ShapeError("--input-size " + std::to_string(mc.input_size) + " does not match the data (" +
                         std::to_string(h) + "); preprocess with the same input size");
    mc.validate();
    return mc;
}

std::string seed_path(const std::string& pattern, std::uint64_t seed) {
    std::string p = pattern;
    const auto at = p.find("{seed}");
    if (at != std::string::npos) p.replace(at, 6, std::to_string(seed));
    return p;
}

class LogFile {
public:
    explicit LogFile(const fs::path& dir) : out_(dir / "runlog.txt", std::ios::trunc) {
        if (!out_) throw IoError("cannot open " + (dir / "runlog.txt").string());
    }
    std::ostream& stream() { return out_; }

private:
    std::ofstream out_;
};

// Slice with the most truth foreground (the middle slice when the mask is empty).
int overlay_slice(const SegmentationMask& truth) {
    int best = truth.depth() / 2;
    std::size_t most = 0;
    for (int z = 0; z < truth.depth(); ++z) {
        std::size_t n = 0;
        for (std::size_t i = 0; i < truth.dims.slice(); ++i) n += truth.slice(z)[i];
        if (n > most) most = n, best = z;
    }
    return best;
}

void write_overlays(const SeqUnet<float>& net, const std::vector<PreprocessedCase>& cases, const fs::path& dir,
                    const std::string& prefix, int batch) {
    ensure_dir(dir);
    for (const auto& c : cases) {
        const Prediction p = predict_volume(net, c.volume, batch);
        emit_overlay(c.volume, c.mask, p.mask, overlay_slice(c.mask), dir / (prefix + c.name() + ".png"));
    }
}

// ---------------------------------------------------------------------------
// Commands

int cmd_synth(const Options& o, std::ostream& out) {
    const auto seeds = o.seeds.empty() ? std::vector<std::uint64_t>{1} : parse_seeds(o.seeds);
    const BenchmarkFiles f = generate_benchmark(o.n_source, o.n_target, seeds.front(), ensure_dir(o.out), o.n_test,
                                                {o.depth, o.height, o.width});
    out << "source manifest: " << f.source_manifest.string() << '\n'
        << "target manifest: " << f.target_manifest.string() << '\n';
    if (!f.target_test_manifest.empty()) out << "target test manifest: " << f.target_test_manifest.string() << '\n';
    return 0;
}

int cmd_preprocess(const Options& o, const Settings& s, std::ostream& out) {
    require(o.manifest, "--manifest");
    const Recipe recipe = parse_recipe(o.recipe);
    const int input_size = s.input_size.value_or(64);
    const DatasetManifest m = load_manifest(o.manifest);
    const fs::path dir = ensure_dir(o.out);
    const fs::path vdir = ensure_dir(dir / "volumes");
    DatasetManifest processed;
    json counts = json::object();
    counts["recipe"] = recipe_name(recipe);
    counts["input_size"] = input_size;
    json subjects = json::array();
    std::size_t total = 0, with_fg = 0;
    for (const auto& e : m.entries) {
        const CtVolume v = load_volume(e.volume);
        const SegmentationMask mask = load_mask(e.mask);
        std::vector<PreprocessedCase> cases;
        try {
            cases = apply_recipe(recipe, v, mask, e.subject, input_size);
        } catch (const std::exception& err) {
            throw std::runtime_error("subject '" + e.subject + "': " + err.what());
        }
        for (const auto& c : cases) {
            const fs::path vp = vdir / (c.name() + ".vox");
            const fs::path mp = vdir / (c.name() + "_mask.vox");
            save_volume(c.volume, vp);
            save_mask(c.mask, mp);
            processed.entries.push_back({c.name(), e.domain, vp, mp});
            const auto seqs = bind_sequences(c.volume, c.mask, c.name());
            std::size_t fg = 0;
            for (const auto& q : seqs) fg += q.foreground() > 0;
            subjects.push_back({{"subject", c.name()},
                                {"domain", domain_name(e.domain)},
                                {"sequences", seqs.size()},
                                {"foreground_sequences", fg}});
            total += seqs.size();
            with_fg += fg;
        }
    }
    counts["subjects"] = subjects;
    counts["sequences"] = total;
    counts["foreground_sequences"] = with_fg;
    save_manifest(processed, dir / "manifest.tsv");
    std::ofstream report(dir / "sequences.json", std::ios::trunc);
    report << counts.dump(2) << '\n';
    if (!report) throw IoError("cannot write " + (dir / "sequences.json").string());
    out << processed.entries.size() << " volumes, " << total << " sequences (" << with_fg
        << " with foreground) -> " << (dir / "manifest.tsv").string() << '\n';
    return 0;
}

int cmd_train(const std::string& command, const Options& o, const Settings& s, std::ostream& out) {
    require(o.manifest, "--manifest");
    const auto cases = load_cases(o.manifest);
    const ModelConfig mc = model_for(s, cases);
    const auto seqs = sequences_of(cases, mc.seq_len);
    std::vector<SliceSequence> source;
    if (command == "adapt") {
        require(o.source_manifest, "--source-manifest");
        const auto src = load_cases(o.source_manifest);
        model_for(s, src);
        source = sequences_of(src, mc.seq_len);
    }
    if (command != "pretrain" && command != "scratch") require(o.pretrained, "--pretrained");

    const fs::path dir = ensure_dir(o.out);
    const fs::path cdir = ensure_dir(dir / "checkpoints");
    LogFile logfile(dir);
    for (std::uint64_t seed : s.seeds) {
        TrainConfig tc = s.train;
        tc.seed = seed;
        RunLog log(&logfile.stream());
        log.set_tag(command + ".seed" + std::to_string(seed));
        Checkpoint ck;
        if (command == "pretrain") {
            ck = pretrain_source(seqs, mc, tc, &log);
        } else if (command == "scratch") {
            ck = train_scratch(seqs, mc, tc, &log);
        } else {
            const Checkpoint pre = load_checkpoint(seed_path(o.pretrained, seed), &mc);
            ck = command == "adapt" ? adapt_domain(pre, source, seqs, tc, &log) : finetune_transfer(pre, seqs, tc, &log);
        }
        const fs::path path = cdir / (command + "_seed" + std::to_string(seed) + ".ck");
        save_checkpoint(ck, path);
        out << command << " seed " << seed << ": best epoch " << ck.epoch << ", loss " << ck.loss << " -> "
            << path.string() << '\n';
    }
    return 0;
}

// Fold results of several seeds appended into one report.
void append(CvResult& into, CvResult&& r) {
    auto cat = [](std::vector<double>& a, const std::vector<double>& b) { a.insert(a.end(), b.begin(), b.end()); };
    cat(into.report.dice, r.report.dice);
    cat(into.report.vs, r.report.vs);
    cat(into.report.sensitivity, r.report.sensitivity);
    cat(into.report.specificity, r.report.specificity);
    into.subjects.insert(into.subjects.end(), r.subjects.begin(), r.subjects.end());
}

void write_subjects(const std::vector<std::pair<std::string, SubjectResult>>& rows, const fs::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out << "method,seed_fold,subject,tp,fp,fn,tn,dice,vs\n";
    char buf[64];
    for (const auto& [tag, r] : rows) {
        out << tag << ',' << r.fold + 1 << ',' << r.subject << ',' << r.counts.tp << ',' << r.counts.fp << ','
            << r.counts.fn << ',' << r.counts.tn << ',';
        std::snprintf(buf, sizeof buf, "%.4f,%.4f", r.dice, r.vs);
        out << buf << '\n';
    }
}

int cmd_evaluate(const Options& o, const Settings& s, std::ostream& out) {
    require(o.manifest, "--manifest");
    const fs::path dir = ensure_dir(o.out);
    const std::string dataset = o.dataset.empty() ? fs::path(o.manifest).stem().string() : o.dataset;
    std::vector<ReportRow> rows;
    std::vector<std::pair<std::string, SubjectResult>> subject_rows;

    if (!o.pred_manifest.empty()) {
        // Compare stored predictions against truth, matched by subject id.
        const DatasetManifest truth = load_manifest(o.manifest);
        const DatasetManifest pred = load_manifest(o.pred_manifest);
        CvResult r;
        ConfusionCounts pooled;
        double dsum = 0, vsum = 0;
        for (const auto& e : truth.entries) {
            const ManifestEntry* p = pred.find(e.subject);
            if (!p) throw DataError("no prediction for subject '" + e.subject + "'");
            const SegmentationMask t = load_mask(e.mask);
            const SegmentationMask q = load_mask(p->mask);
            if (!(t.dims == q.dims)) throw ShapeError("subject '" + e.subject + "': prediction shape differs from truth");
            SubjectResult sr;
            sr.subject = e.subject;
            sr.counts = confusion(q.voxels, t.voxels);
            sr.dice = dice_score(sr.counts).value;
            sr.vs = volume_similarity(sr.counts).value;
            pooled += sr.counts;
            dsum += sr.dice;
            vsum += sr.vs;
            subject_rows.push_back({"given", sr});
        }
        if (truth.entries.empty()) throw DataError("truth manifest lists no subjects");
        const double n = static_cast<double>(truth.entries.size());
        r.report.dice.push_back(dsum / n);
        r.report.vs.push_back(vsum / n);
        r.report.sensitivity.push_back(sensitivity(pooled).value);
        r.report.specificity.push_back(specificity(pooled).value);
        rows.push_back(ReportRow::from_summary("given", dataset, aggregate_cv(r.report)));
    } else if (!o.checkpoint.empty()) {
        // Score trained checkpoint(s) on held-out cases.
        const auto cases = load_cases(o.manifest);
        const ModelConfig mc = model_for(s, cases);
        CvResult all;
        std::string method;
        for (std::uint64_t seed : s.seeds) {
            const Checkpoint ck = load_checkpoint(seed_path(o.checkpoint, seed), &mc);
            method = ck.method == "adapt"      ? method_name(Method::Adapt)
                     : ck.method == "finetune" ? method_name(Method::Transfer)
                     : ck.method == "scratch"  ? method_name(Method::Scratch)
                                               : ck.method;
            CvResult r;
            score_cases(ck.net, cases, 0, s.train.batch, r);
            for (auto sr : r.subjects) subject_rows.push_back({method + ".seed" + std::to_string(seed), sr});
            append(all, std::move(r));
            write_overlays(ck.net, cases, dir / "overlays", ck.method + "_seed" + std::to_string(seed) + "_",
                           s.train.batch);
        }
        rows.push_back(ReportRow::from_summary(method, dataset, aggregate_cv(all.report)));
    } else {
        // Full protocol: train each mode per fold and seed, test on held-out subjects.
        require(o.modes, "--mode (or --checkpoint / --pred-manifest)");
        const auto cases = load_cases(o.manifest);
        const ModelConfig mc = model_for(s, cases);
        std::vector<PreprocessedCase> test_cases;
        if (!o.test_manifest.empty()) {
            test_cases = load_cases(o.test_manifest);
            model_for(s, test_cases);
        }
        std::vector<SliceSequence> source;
        if (!o.source_manifest.empty()) {
            const auto src = load_cases(o.source_manifest);
            model_for(s, src);
            source = sequences_of(src, mc.seq_len);
        }
        std::vector<std::string> subjects;
        for (const auto& c : cases)
            if (std::find(subjects.begin(), subjects.end(), c.subject) == subjects.end()) subjects.push_back(c.subject);

        LogFile logfile(dir);
        const fs::path cdir = ensure_dir(dir / "checkpoints");
        std::map<std::uint64_t, Checkpoint> pretrained_by_seed;
        std::stringstream modes(o.modes);
        std::string mode;
        while (std::getline(modes, mode, ',')) {
            const Method method = parse_method(mode);
            CvResult all;
            for (std::uint64_t seed : s.seeds) {
                TrainConfig tc = s.train;
                tc.seed = seed;
                std::optional<Checkpoint> pre;
                if (method != Method::Scratch) {
                    if (o.pretrained.empty()) {
                        if (source.empty())
                            throw std::invalid_argument(std::string(method_name(method)) +
                                                        " needs --pretrained or --source-manifest");
                        // One source model per seed, shared by every mode.
                        auto it = pretrained_by_seed.find(seed);
                        if (it == pretrained_by_seed.end()) {
                            RunLog plog(&logfile.stream());
                            plog.set_tag("pretrain.seed" + std::to_string(seed));
                            it = pretrained_by_seed.emplace(seed, pretrain_source(source, mc, tc, &plog)).first;
                        }
                        pre = it->second;
                    } else {
                        pre = load_checkpoint(seed_path(o.pretrained, seed), &mc);
                    }
                }
                if (method == Method::Adapt && source.empty())
                    throw std::invalid_argument("mode da needs --source-manifest");
                RunLog log(&logfile.stream());
                log.set_tag(mode + ".seed" + std::to_string(seed));
                const std::string tag = mode + "_seed" + std::to_string(seed);
                CvResult r;
                if (!test_cases.empty()) {
                    // Fixed split: train on every manifest subject, test on the held-out manifest.
                    const auto seqs = sequences_of(cases, mc.seq_len);
                    Checkpoint ck;
                    switch (method) {
                        case Method::Scratch: ck = train_scratch(seqs, mc, tc, &log); break;
                        case Method::Transfer: ck = finetune_transfer(*pre, seqs, tc, &log); break;
                        case Method::Adapt: ck = adapt_domain(*pre, source, seqs, tc, &log); break;
                    }
                    score_cases(ck.net, test_cases, 0, tc.batch, r);
                    save_checkpoint(ck, cdir / (tag + ".ck"));
                    write_overlays(ck.net, test_cases, dir / "overlays", tag + "_", tc.batch);
                } else {
                    const FoldSplit split = make_folds(subjects, o.folds, seed);
                    r = cross_validate(method, cases, split, mc, tc, pre ? &*pre : nullptr, source, &log);
                    for (int f = 0; f < split.k; ++f) {
                        const std::string ftag = tag + "_fold" + std::to_string(f + 1);
                        save_checkpoint(r.models[f], cdir / (ftag + ".ck"));
                        std::vector<PreprocessedCase> test;
                        for (const auto& c : cases)
                            if (std::find(split.test[f].begin(), split.test[f].end(), c.subject) != split.test[f].end())
                                test.push_back(c);
                        write_overlays(r.models[f].net, test, dir / "overlays", ftag + "_", tc.batch);
                    }
                }
                for (const auto& sr : r.subjects)
                    subject_rows.push_back({std::string(method_name(method)) + ".seed" + std::to_string(seed), sr});
                r.models.clear();
                append(all, std::move(r));
            }
            rows.push_back(ReportRow::from_summary(method_name(method), dataset, aggregate_cv(all.report)));
        }
    }
    write_report(rows, dir / "report.csv");
    write_subjects(subject_rows, dir / "subjects.csv");
    print_report(rows, out);
    return 0;
}

int cmd_predict(const Options& o, const Settings& s, std::ostream& out) {
    require(o.manifest, "--manifest");
    require(o.checkpoint, "--checkpoint");
    const Checkpoint ck = load_checkpoint(seed_path(o.checkpoint, s.seeds.front()));
    const DatasetManifest m = load_manifest(o.manifest);
    const fs::path dir = ensure_dir(o.out);
    const fs::path pdir = ensure_dir(dir / "predictions");
    DatasetManifest preds;
    for (const auto& e : m.entries) {
        const CtVolume v = load_volume(e.volume);
        const Prediction p = predict_volume(ck, v, s.train.batch);
        const fs::path prob = pdir / (e.subject + "_prob.vox");
        const fs::path mask = pdir / (e.subject + "_pred.vox");
        save_volume(p.prob, prob);
        save_mask(p.mask, mask);
        preds.entries.push_back({e.subject, e.domain, prob, mask});
        const SegmentationMask truth = load_mask(e.mask);
        if (truth.dims == v.dims) {
            ensure_dir(dir / "overlays");
            emit_overlay(v, truth, p.mask, overlay_slice(truth), dir / "overlays" / (e.subject + ".png"));
        }
    }
    save_manifest(preds, dir / "predictions.tsv");
    out << preds.entries.size() << " predictions -> " << (dir / "predictions.tsv").string() << '\n';
    return 0;
}

int cmd_report(const Options& o, std::ostream& out) {
    if (o.inputs.empty()) throw std::invalid_argument("missing required flag --input");
    std::vector<ReportRow> rows;
    for (const auto& in : o.inputs) {
        auto r = read_report(in);
        rows.insert(rows.end(), r.begin(), r.end());
    }
    const fs::path dir = ensure_dir(o.out);
    write_report(rows, dir / "report.csv");
    print_report(rows, out);
    return 0;
}

void add_train_flags(CLI::App* c, Options& o) {
    c->add_option("--epochs", o.epochs, "Training epochs");
    c->add_option("--lambda-seg", o.lambda_seg, "Weight of the dice term in the adaptation loss");
    c->add_option("--lr-seg", o.lr_seg, "Segmentation network learning rate");
    c->add_option("--lr-disc", o.lr_disc, "Discriminator learning rate");
    c->add_option("--batch", o.batch, "Sequences per batch");
    c->add_option("--width-divisor", o.width_divisor, "Divide every channel count by this power of two");
    c->add_option("--input-size", o.input_size, "Slice size (must match preprocessed data)");
    c->add_option("--foreground-only", o.foreground_only, "Train only on sequences with foreground (true/false)");
    c->add_option("--config", o.config, "JSON file with training settings");
    c->add_option("--seed", o.seeds, "Seed or comma-separated seed list");
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    Options o;
    CLI::App app{"Sequential attention U-Net segmentation with adversarial domain adaptation", "orbitseg"};
    app.require_subcommand(1, 1);
    app.set_help_all_flag("--help-all", "Show help for every command");

    auto* synth = app.add_subcommand("synth", "Generate a synthetic two-domain benchmark");
    synth->add_option("--out", o.out, "Output directory");
    synth->add_option("--n-source", o.n_source, "Source-style volumes");
    synth->add_option("--n-target", o.n_target, "Target-style training volumes");
    synth->add_option("--n-test", o.n_test, "Additional held-out target volumes");
    synth->add_option("--depth", o.depth, "Slices per volume");
    synth->add_option("--height", o.height, "Rows per slice");
    synth->add_option("--width", o.width, "Columns per slice");
    synth->add_option("--seed", o.seeds, "Benchmark seed");

    auto* pre = app.add_subcommand("preprocess", "Run a preprocessing recipe over a manifest");
    pre->add_option("--manifest", o.manifest, "Input manifest")->required();
    pre->add_option("--recipe", o.recipe, "lidc, pddca, orbit or synth");
    pre->add_option("--out", o.out, "Output directory");
    pre->add_option("--input-size", o.input_size, "In-plane size of the processed slices");

    auto* pt = app.add_subcommand("pretrain", "Train on source data");
    pt->add_option("--manifest", o.manifest, "Processed source manifest")->required();
    pt->add_option("--out", o.out, "Output directory");
    add_train_flags(pt, o);

    auto* ad = app.add_subcommand("adapt", "Adversarial domain adaptation from a pretrained checkpoint");
    ad->add_option("--manifest", o.manifest, "Processed target manifest")->required();
    ad->add_option("--source-manifest", o.source_manifest, "Processed source manifest")->required();
    ad->add_option("--pretrained", o.pretrained, "Pretrained checkpoint ({seed} is substituted)")->required();
    ad->add_option("--out", o.out, "Output directory");
    add_train_flags(ad, o);

    auto* ft = app.add_subcommand("finetune", "Fine-tune a pretrained checkpoint with the extractor frozen");
    ft->add_option("--manifest", o.manifest, "Processed target manifest")->required();
    ft->add_option("--pretrained", o.pretrained, "Pretrained checkpoint ({seed} is substituted)")->required();
    ft->add_option("--out", o.out, "Output directory");
    add_train_flags(ft, o);

    auto* sc = app.add_subcommand("scratch", "Train on target data from random initialization");
    sc->add_option("--manifest", o.manifest, "Processed target manifest")->required();
    sc->add_option("--out", o.out, "Output directory");
    add_train_flags(sc, o);

    auto* ev = app.add_subcommand("evaluate", "Score predictions, checkpoints, or a full k-fold protocol");
    ev->add_option("--manifest", o.manifest, "Processed target (truth) manifest")->required();
    ev->add_option("--pred-manifest", o.pred_manifest, "Manifest of predicted masks to score");
    ev->add_option("--checkpoint", o.checkpoint, "Trained checkpoint to score ({seed} is substituted)");
    ev->add_option("--mode", o.modes, "scratch, tr, da (comma-separated for several)");
    ev->add_option("--folds", o.folds, "Cross-validation folds (1 trains and tests on all subjects)");
    ev->add_option("--test-manifest", o.test_manifest, "Held-out manifest: train on --manifest, test here");
    ev->add_option("--source-manifest", o.source_manifest, "Processed source manifest");
    ev->add_option("--pretrained", o.pretrained, "Pretrained checkpoint ({seed} is substituted)");
    ev->add_option("--dataset", o.dataset, "Dataset label in the report");
    ev->add_option("--out", o.out, "Output directory");
    add_train_flags(ev, o);

    auto* pr = app.add_subcommand("predict", "Predict masks for every volume of a manifest");
    pr->add_option("--manifest", o.manifest, "Processed manifest")->required();
    pr->add_option("--checkpoint", o.checkpoint, "Trained checkpoint")->required();
    pr->add_option("--out", o.out, "Output directory");
    pr->add_option("--batch", o.batch, "Sequences per batch");
    pr->add_option("--seed", o.seeds, "Seed substituted into {seed}");

    auto* rp = app.add_subcommand("report", "Merge report files into one table");
    rp->add_option("--input", o.inputs, "report.csv files")->required()->delimiter(',');
    rp->add_option("--out", o.out, "Output directory");

    if (!args.empty() && !args.front().empty() && args.front()[0] != '-') {
        const auto subs = app.get_subcommands([](const CLI::App*) { return true; });
        const bool known = std::any_of(subs.begin(), subs.end(), [&](const CLI::App* a) { return a->get_name() == args.front(); });
        if (!known) {
            err << "orbitseg: error: unknown command '" << args.front() << "'\n" << app.help() << '\n';
            return 2;
        }
    }

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e, out, err);
        err << "orbitseg: error: " << e.what() << " (run with --help for usage)\n";
        return e.get_exit_code();
    }

    try {
        if (synth->parsed()) return cmd_synth(o, out);
        if (pre->parsed()) {
            Settings s;
            if (o.input_size) s.input_size = o.input_size;
            return cmd_preprocess(o, s, out);
        }
        if (rp->parsed()) return cmd_report(o, out);
        const Settings s = resolve(o);
        if (pt->parsed()) return cmd_train("pretrain", o, s, out);
        if (ad->parsed()) return cmd_train("adapt", o, s, out);
        if (ft->parsed()) return cmd_train("finetune", o, s, out);
        if (sc->parsed()) return cmd_train("scratch", o, s, out);
        if (ev->parsed()) return cmd_evaluate(o, s, out);
        if (pr->parsed()) return cmd_predict(o, s, out);
    } catch (const std::exception& e) {
        err << "orbitseg: error: " << e.what() << '\n';
        return 1;
    }
    err << app.help() << '\n';
    return 2;
}

}  // namespace orbitseg
