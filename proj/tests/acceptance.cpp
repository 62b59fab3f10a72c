// Acceptance suite: one PASS/FAIL line per criterion. Criteria can be
// selected on the command line (e.g. `acceptance A1 A5`); default runs all.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "orbitseg/checkpoint.hpp"
#include "orbitseg/losses.hpp"
#include "orbitseg/metrics.hpp"
#include "orbitseg/model.hpp"
#include "orbitseg/preprocess.hpp"
#include "orbitseg/report.hpp"
#include "orbitseg/synthdata.hpp"
#include "orbitseg/training.hpp"
#include "test_util.hpp"

using namespace orbitseg;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

// ---------------------------------------------------------------------------
// A1: published layer dimensions

Outcome a1_shapes() {
    const auto t0 = std::chrono::steady_clock::now();
    const ModelConfig cfg{};
    SeqUnet<float> net(cfg, 7);
    Discriminator<float> disc(cfg, 8);
    Rng rng(1);
    const auto x = testutil::random_tensor<float>({3, 1, 64, 64}, rng, 0, 1);
    SeqUnetCache<float> cache;
    ShapeTrace trace;
    net.forward(x, 1, cache, {}, &trace);
    DiscriminatorCache<float> dc;
    disc.forward(cache.bottleneck, 1, dc, &trace);
    const double elapsed = seconds_since(t0);
    const std::pair<const char*, Shape4> expected[] = {
        {"Input Sequential Images", {3, 1, 64, 64}}, {"Encoding Block 1", {3, 64, 64, 64}},
        {"Pooling 1", {3, 64, 32, 32}},              {"Encoding Block 2", {3, 128, 32, 32}},
        {"Pooling 2", {3, 128, 16, 16}},             {"Encoding Block 3", {3, 256, 16, 16}},
        {"Pooling 3", {3, 256, 8, 8}},               {"Bidirectional C-LSTM 1", {3, 512, 8, 8}},
        {"Upsampling 1", {3, 512, 16, 16}},          {"Attention Block 3", {3, 256, 16, 16}},
        {"Concatenate 1", {3, 768, 16, 16}},         {"Decoding Block 3", {3, 256, 16, 16}},
        {"Upsampling 2", {3, 256, 32, 32}},          {"Attention Block 2", {3, 128, 32, 32}},
        {"Concatenate 2", {3, 384, 32, 32}},         {"Decoding Block 2", {3, 128, 32, 32}},
        {"Upsampling 3", {3, 128, 64, 64}},          {"Attention Block 1", {3, 64, 64, 64}},
        {"Concatenate 3", {3, 192, 64, 64}},         {"Decoding Block 1", {3, 64, 64, 64}},
        {"Bidirectional C-LSTM 2", {1, 64, 64, 64}}, {"Segmentation Output", {1, 1, 64, 64}},
        {"Summation 1", {1, 512, 8, 8}},             {"Conv 1", {1, 128, 1, 1}},
        {"FC 1", {1, 10, 1, 1}},                     {"FC 2", {1, 2, 1, 1}},
    };
    if (trace.size() != std::size(expected))
        return {false, "trace has " + std::to_string(trace.size()) + " rows, expected " + std::to_string(std::size(expected))};
    for (std::size_t i = 0; i < trace.size(); ++i)
        if (trace[i].first != expected[i].first || trace[i].second != expected[i].second)
            return {false, "row '" + trace[i].first + "' is " + shape_string(trace[i].second)};
    return {elapsed < 5.0, std::to_string(trace.size()) + " rows match, forward " + fmt("%.2f s (limit 5 s)", elapsed)};
}

// ---------------------------------------------------------------------------
// A2: analytic gradients against central differences

Outcome a2_gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    const ModelConfig cfg{16, 3, 8};
    SeqUnet<double> net(cfg, 21);
    Discriminator<double> disc(cfg, 22);
    Rng rng(23);
    const auto x = testutil::random_tensor<double>({6, 1, 16, 16}, rng, 0, 1);
    const auto gp = testutil::random_tensor<double>({2, 1, 16, 16}, rng);
    const auto gl = testutil::random_tensor<double>({2, 2, 1, 1}, rng);
    auto dotp = [](const Tensor<double>& a, const Tensor<double>& b) {
        double s = 0;
        for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
        return s;
    };
    auto loss = [&] {
        SeqUnetCache<double> k;
        net.forward(x, 2, k);
        DiscriminatorCache<double> dk;
        disc.forward(k.bottleneck, 2, dk);
        return dotp(k.prob, gp) + dotp(dk.logits, gl);
    };
    {
        SeqUnetCache<double> k;
        net.forward(x, 2, k);
        DiscriminatorCache<double> dk;
        disc.forward(k.bottleneck, 2, dk);
        net.zero_grad();
        disc.zero_grad();
        Tensor<double> dfeat = k.bottleneck.like();
        disc.backward(dk, gl, &dfeat);
        net.backward(k, gp, &dfeat);
    }

    struct Probe {
        std::string label;
        Weight<double>* w;
        std::size_t index;
    };
    std::vector<Probe> probes;
    // Strongest-gradient entry inside [lo, hi).
    auto strongest = [](const Weight<double>& w, std::size_t lo, std::size_t hi) {
        std::size_t best = lo;
        for (std::size_t i = lo; i < hi; ++i)
            if (std::abs(w.grad[i]) > std::abs(w.grad[best])) best = i;
        return best;
    };
    auto add_tensor = [&](const std::string& label, Weight<double>& w) {
        probes.push_back({label, &w, strongest(w, 0, w.value.size())});
    };
    auto add_gates = [&](const std::string& label, ConvLstmParams<double>& p) {
        const char* gate_names[] = {"input", "forget", "output", "candidate"};
        const std::size_t per_row = p.gates.weight.value.size() / (4 * static_cast<std::size_t>(p.hidden));
        for (int g = 0; g < 4; ++g) {
            const std::size_t lo = static_cast<std::size_t>(g) * p.hidden * per_row;
            probes.push_back({label + ".weight[" + gate_names[g] + "]", &p.gates.weight,
                              strongest(p.gates.weight, lo, lo + p.hidden * per_row)});
            const std::size_t blo = static_cast<std::size_t>(g) * p.hidden;
            probes.push_back({label + ".bias[" + gate_names[g] + "]", &p.gates.bias,
                              strongest(p.gates.bias, blo, blo + p.hidden)});
        }
    };
    auto& P = net.params();
    for (int l = 0; l < 3; ++l) {
        const std::string base = "att" + std::to_string(l + 1);
        add_tensor(base + ".wx", P.att[l].wx.weight);
        add_tensor(base + ".wg", P.att[l].wg.weight);
        add_tensor(base + ".psi", P.att[l].psi.weight);
        add_tensor(base + ".psi.bias", P.att[l].psi.bias);
    }
    add_gates("bottleneck.fwd", P.bottleneck_fwd);
    add_gates("bottleneck.bwd", P.bottleneck_bwd);
    add_gates("output.fwd", P.output_fwd);
    add_gates("output.bwd", P.output_bwd);
    auto& D = disc.params();
    for (int i = 0; i < 3; ++i) {
        add_tensor("disc.conv" + std::to_string(i + 1), D.conv[i].weight);
        add_tensor("disc.conv" + std::to_string(i + 1) + ".bias", D.conv[i].bias);
    }
    add_tensor("disc.fc1", D.fc1.weight);
    add_tensor("disc.fc2", D.fc2.weight);
    add_tensor("enc1.0", P.enc[0][0].weight);
    add_tensor("dec1.0", P.dec1.weight);
    add_tensor("head", P.head.weight);

    const double h = 1e-5;
    double worst = 0;
    std::string worst_label;
    int failures = 0;
    for (const auto& p : probes) {
        double& v = p.w->value[p.index];
        const double saved = v;
        v = saved + h;
        const double up = loss();
        v = saved - h;
        const double dn = loss();
        v = saved;
        const double num = (up - dn) / (2 * h);
        const double ana = p.w->grad[p.index];
        const double rel = std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1e-12});
        if (rel > worst) worst = rel, worst_label = p.label;
        if (!(rel < 1e-4)) {
            ++failures;
            std::cerr << "  A2 " << p.label << "[" << p.index << "] analytic " << ana << " numeric " << num << " rel " << rel
                      << '\n';
        }
    }
    const double elapsed = seconds_since(t0);
    std::ostringstream d;
    d << probes.size() << " parameters, worst rel err " << fmt("%.2e", worst) << " (" << worst_label << "), "
      << failures << " above 1e-4, " << fmt("%.1f s (limit 120 s)", elapsed);
    return {failures == 0 && probes.size() >= 10 && elapsed < 120.0, d.str()};
}

// ---------------------------------------------------------------------------
// A3: loss identities

Outcome a3_losses() {
    std::vector<double> m(64 * 64, 0.0);
    for (int i = 0; i < 64; ++i) m[static_cast<std::size_t>(i) * 65 % m.size()] = 1.0;
    const double d = soft_dice<double>(m, m, 1.0);
    const double zero[2] = {0, 0};
    const double dl = discriminator_loss<double>(zero, zero);
    const double r = foreground_ratio<double>(m, LossConfig{}.foreground_ratio_cap);
    const bool ok = std::abs(d - 1.0) <= 1e-6 && std::abs(dl - 2 * std::numbers::ln2) <= 1e-9 && r == 64.0;
    std::ostringstream s;
    s.precision(12);
    s << "soft_dice(m,m)=" << d << " disc_loss(0,0)=" << dl << " r=" << r;
    return {ok, s.str()};
}

// ---------------------------------------------------------------------------
// A4: metric oracle

Outcome a4_metrics() {
    int mismatches = 0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        Rng rng(seed + 7000);
        std::vector<std::uint8_t> pred(64), truth(64);
        const double pp = rng.uniform(), pt = rng.uniform();
        for (int i = 0; i < 64; ++i) {
            pred[i] = rng.uniform() < pp;
            truth[i] = rng.uniform() < pt;
        }
        long tp = 0, fp = 0, fn = 0, tn = 0;
        for (int i = 0; i < 64; ++i) {
            if (pred[i] && truth[i]) ++tp;
            else if (pred[i]) ++fp;
            else if (truth[i]) ++fn;
            else ++tn;
        }
        const ConfusionCounts c = confusion(pred, truth);
        bool ok = c.tp == static_cast<std::uint64_t>(tp) && c.fp == static_cast<std::uint64_t>(fp) &&
                  c.fn == static_cast<std::uint64_t>(fn) && c.tn == static_cast<std::uint64_t>(tn);
        // Each ratio q = a / b is checked through the integer identity q * b == a
        // up to the rounding of one division.
        auto agrees = [](double value, double scale, long num, long den) {
            return std::abs(value / scale * den - num) <= 1e-9 * std::max(1L, num);
        };
        const long den = 2 * tp + fp + fn;
        if (den > 0) {
            ok = ok && agrees(dice_score(c).value, 100.0, 2 * tp, den);
            ok = ok && agrees(volume_similarity(c).value, 100.0, den - std::labs(fn - fp), den);
        } else {
            ok = ok && dice_score(c).degenerate && volume_similarity(c).degenerate;
        }
        if (tp + fn > 0) ok = ok && agrees(sensitivity(c).value, 1.0, tp, tp + fn);
        if (tn + fp > 0) ok = ok && agrees(specificity(c).value, 1.0, tn, tn + fp);
        mismatches += !ok;
    }
    return {mismatches == 0, "1000 random 8x8 pairs, " + std::to_string(mismatches) + " mismatches"};
}

// ---------------------------------------------------------------------------
// Shared synthetic data helpers

std::vector<PreprocessedCase> load_processed(const fs::path& manifest, int input_size) {
    std::vector<PreprocessedCase> out;
    for (const auto& e : load_manifest(manifest).entries) {
        auto p = apply_recipe(Recipe::Synth, load_volume(e.volume), load_mask(e.mask), e.subject, input_size);
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

double test_dice(const Checkpoint& ck, const std::vector<PreprocessedCase>& test) {
    CvResult r;
    score_cases(ck.net, test, 0, 8, r);
    return r.report.dice[0];
}

// ---------------------------------------------------------------------------
// A5: adaptation benefit on the synthetic benchmark

// Desk configuration: 32x32 slices, 1/16 channel width, one benchmark draw.
// The three target-domain methods share one optimizer setting. They see about
// a tenth of the updates per epoch that source pretraining does, so they use
// twice the pretraining rate.
struct DeskConfig {
    int input_size = 32;
    int width_divisor = 16;
    int epochs = 100;
    double lr_pretrain = 5e-5;
    double lr_seg = 1e-4;
    double lr_disc = 2e-4;
    double lambda_seg = 0.05;
    std::uint64_t benchmark_seed = 1;
};

Outcome a5_adaptation() {
    const auto t0 = std::chrono::steady_clock::now();
    const DeskConfig desk;
    const fs::path dir = testutil::scratch("acceptance_a5");
    const BenchmarkFiles files = generate_benchmark(40, 4, desk.benchmark_seed, dir, 3);
    const auto src = load_processed(files.source_manifest, desk.input_size);
    const auto tgt = load_processed(files.target_manifest, desk.input_size);
    const auto test = load_processed(files.target_test_manifest, desk.input_size);
    const auto src_seq = sequences_of(src);
    const auto tgt_seq = sequences_of(tgt);
    const ModelConfig mc{desk.input_size, 3, desk.width_divisor};

    double sum_da = 0, sum_tr = 0, sum_sc = 0;
    std::ostringstream per_seed;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
        TrainConfig tc;
        tc.epochs = desk.epochs;
        tc.lr_seg = desk.lr_seg;
        tc.lr_disc = desk.lr_disc;
        tc.loss.lambda_seg = desk.lambda_seg;
        tc.seed = seed;
        TrainConfig pc = tc;
        pc.lr_seg = desk.lr_pretrain;
        const Checkpoint pre = pretrain_source(src_seq, mc, pc);
        const double da = test_dice(adapt_domain(pre, src_seq, tgt_seq, tc), test);
        const double tr = test_dice(finetune_transfer(pre, tgt_seq, tc), test);
        const double sc = test_dice(train_scratch(tgt_seq, mc, tc), test);
        sum_da += da, sum_tr += tr, sum_sc += sc;
        per_seed << " seed" << seed << "[da " << fmt("%.2f", da) << " tr " << fmt("%.2f", tr) << " scratch "
                 << fmt("%.2f", sc) << "]";
        std::cerr << "  A5 seed " << seed << ": da " << da << " tr " << tr << " scratch " << sc << " after "
                  << seconds_since(t0) << " s\n";
    }
    const double da = sum_da / 3, tr = sum_tr / 3, sc = sum_sc / 3;
    const double elapsed = seconds_since(t0);
    std::ostringstream d;
    d << "mean DICE da " << fmt("%.2f", da) << " tr " << fmt("%.2f", tr) << " scratch " << fmt("%.2f", sc)
      << " (need da >= scratch+5 and da >= tr-2)," << per_seed.str() << ", " << fmt("%.0f s (limit 1800 s)", elapsed);
    return {da >= sc + 5 && da >= tr - 2 && elapsed < 1800, d.str()};
}

// ---------------------------------------------------------------------------
// A6: overfitting one volume

Outcome a6_overfit() {
    const auto t0 = std::chrono::steady_clock::now();
    const ModelConfig mc{32, 3, 8};
    const SynthCase c = generate_volume(SynthSpec::target_style(17));
    const auto cases = apply_recipe(Recipe::Synth, c.volume, c.mask, "overfit", mc.input_size);
    TrainConfig tc;
    tc.epochs = 200;
    tc.lr_seg = 2e-3;
    tc.batch = 4;
    tc.seed = 3;
    const Checkpoint ck = train_scratch(sequences_of(cases), mc, tc);
    const double dice = test_dice(ck, cases) / 100.0;
    const double elapsed = seconds_since(t0);
    return {dice > 0.95 && elapsed < 300,
            "training DICE " + fmt("%.4f", dice) + " (best epoch " + std::to_string(ck.epoch) + "), " +
                fmt("%.0f s (limit 300 s)", elapsed)};
}

// ---------------------------------------------------------------------------
// A7: frozen parameters and determinism

bool same_weights(const SeqUnet<float>& a, const SeqUnet<float>& b, const std::function<bool(ParamGroup)>& which,
                  int* differing = nullptr) {
    std::vector<const Tensor<float>*> ta;
    a.params().for_each([&](const std::string&, ParamGroup, const Weight<float>& w) { ta.push_back(&w.value); });
    std::size_t i = 0;
    bool same = true;
    int diff = 0;
    b.params().for_each([&](const std::string&, ParamGroup g, const Weight<float>& w) {
        const bool eq = ta[i++]->vec() == w.value.vec();
        if (which(g)) same = same && eq;
        else diff += !eq;
    });
    if (differing) *differing = diff;
    return same;
}

Outcome a7_freezing() {
    const ModelConfig mc{16, 3, 16};
    std::vector<PreprocessedCase> src, tgt;
    for (int i = 0; i < 3; ++i) {
        const SynthCase s = generate_volume(SynthSpec::source_style(300 + i, {6, 32, 32}));
        auto p = apply_recipe(Recipe::Synth, s.volume, s.mask, "s" + std::to_string(i), mc.input_size);
        src.insert(src.end(), p.begin(), p.end());
    }
    const SynthCase t = generate_volume(SynthSpec::target_style(400, {6, 32, 32}));
    tgt = apply_recipe(Recipe::Synth, t.volume, t.mask, "t", mc.input_size);
    const auto ss = sequences_of(src), ts = sequences_of(tgt);
    TrainConfig tc;
    tc.epochs = 4;
    tc.lr_seg = 1e-3;
    tc.lr_disc = 1e-3;
    tc.batch = 4;
    const Checkpoint pre = pretrain_source(ss, mc, tc);
    const SeqUnet<float> before = pre.net;
    auto all = [](ParamGroup) { return true; };

    const Checkpoint da = adapt_domain(pre, ss, ts, tc);
    const bool source_untouched = same_weights(before, pre.net, all);
    int tr_changed = 0;
    const Checkpoint tr = finetune_transfer(pre, ts, tc);
    const bool extractor_frozen = same_weights(pre.net, tr.net, in_extractor, &tr_changed);
    int da_changed = 0;
    same_weights(pre.net, da.net, [](ParamGroup) { return false; }, &da_changed);

    RunLog l1, l2;
    adapt_domain(pre, ss, ts, tc, &l1);
    adapt_domain(pre, ss, ts, tc, &l2);
    RunLog s1, s2;
    train_scratch(ts, mc, tc, &s1);
    train_scratch(ts, mc, tc, &s2);
    auto identical = [](const RunLog& a, const RunLog& b) {
        if (a.records().size() != b.records().size()) return false;
        for (std::size_t i = 0; i < a.records().size(); ++i) {
            const auto &x = a.records()[i], &y = b.records()[i];
            if (x.loss != y.loss || x.dice != y.dice || x.disc_loss != y.disc_loss || x.adv_loss != y.adv_loss) return false;
        }
        return !a.records().empty();
    };
    const bool det = identical(l1, l2) && identical(s1, s2);
    std::ostringstream d;
    d << "source model untouched by adaptation: " << (source_untouched ? "yes" : "no")
      << ", fine-tune extractor bit-identical: " << (extractor_frozen ? "yes" : "no") << " (" << tr_changed
      << " other tensors changed), adaptation updated " << da_changed << " tensors, identical traces: "
      << (det ? "yes" : "no");
    return {source_untouched && extractor_frozen && tr_changed > 0 && da_changed > 0 && det, d.str()};
}

// ---------------------------------------------------------------------------
// A8: command-line pipeline

Outcome a8_pipeline() {
    const char* cli = std::getenv("ORBITSEG_CLI");
    if (!cli) return {false, "ORBITSEG_CLI is not set"};
    const fs::path dir = testutil::scratch("acceptance_a8");
    const std::string d = dir.string();
    const std::string train = " --epochs 2 --width-divisor 16 --batch 4 --seed 1";
    const std::vector<std::string> steps = {
        "synth --out " + d + "/raw --n-source 3 --n-target 2 --depth 6 --height 32 --width 32 --seed 5",
        "preprocess --manifest " + d + "/raw/source.tsv --recipe synth --input-size 16 --out " + d + "/src",
        "preprocess --manifest " + d + "/raw/target.tsv --recipe synth --input-size 16 --out " + d + "/tgt",
        "pretrain --manifest " + d + "/src/manifest.tsv --out " + d + "/run" + train,
        "adapt --manifest " + d + "/tgt/manifest.tsv --source-manifest " + d + "/src/manifest.tsv --pretrained " + d +
            "/run/checkpoints/pretrain_seed{seed}.ck --out " + d + "/run" + train,
        "evaluate --manifest " + d + "/tgt/manifest.tsv --checkpoint " + d +
            "/run/checkpoints/adapt_seed{seed}.ck --width-divisor 16 --seed 1 --out " + d + "/eval",
        "report --input " + d + "/eval/report.csv --out " + d + "/final",
    };
    for (const auto& s : steps) {
        const std::string cmd = std::string("\"") + cli + "\" " + s + " > " + d + "/log.txt 2>&1";
        const int rc = std::system(cmd.c_str());
        if (rc != 0) {
            std::ifstream log(dir / "log.txt");
            std::stringstream text;
            text << log.rdbuf();
            return {false, "'" + s.substr(0, s.find(' ')) + "' exited with " + std::to_string(rc) + ": " + text.str()};
        }
    }
    std::ifstream report(dir / "final" / "report.csv");
    std::string header;
    std::getline(report, header);
    if (header != kReportHeader) return {false, "unexpected report header '" + header + "'"};
    const auto rows = read_report(dir / "final" / "report.csv");
    std::size_t pngs = 0;
    for (const auto& f : fs::directory_iterator(dir / "eval" / "overlays")) pngs += f.path().extension() == ".png";
    if (rows.size() != 1) return {false, "report has " + std::to_string(rows.size()) + " rows"};
    const bool ok = pngs == 2 && fs::exists(dir / "run" / "runlog.txt");
    return {ok, "7 commands exited 0, report rows " + std::to_string(rows.size()) + " (" + rows[0].method + " dice " +
                    fmt("%.2f", rows[0].dice_mean) + " +- " + fmt("%.2f", rows[0].dice_std) + "), overlays " +
                    std::to_string(pngs)};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"A1", a1_shapes},     {"A2", a2_gradients}, {"A3", a3_losses},   {"A4", a4_metrics},
        {"A5", a5_adaptation}, {"A6", a6_overfit},   {"A7", a7_freezing}, {"A8", a8_pipeline},
    };
    std::vector<std::string> selected(argv + 1, argv + argc);
    int failed = 0;
    for (const auto& [id, run] : criteria) {
        if (!selected.empty() && std::find(selected.begin(), selected.end(), id) == selected.end()) continue;
        Outcome o;
        try {
            o = run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        std::cout << id << (o.pass ? " PASS " : " FAIL ") << o.detail << std::endl;
        failed += !o.pass;
    }
    return failed == 0 ? 0 : 1;
}
