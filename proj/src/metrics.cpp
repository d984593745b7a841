#include "adapt/metrics.hpp"

#include <cmath>
#include <cstdio>

#include "adapt/protolayer.hpp"
#include "adapt/stage2.hpp"
#include "adapt/stage3.hpp"
#include "adapt/training.hpp"

namespace adapt {

EvalResult evaluate(const ModelState& model, std::span<const WsiBag* const> bags, int top_j,
                    double threshold) {
    if (bags.empty()) throw std::domain_error("evaluate: empty bag set");
    const bool attention = model.stage >= 3;
    EvalResult r;
    r.n_bags = static_cast<int>(bags.size());
    long disagreements = 0;
    for (const WsiBag* bag : bags) {
        const BagForward fwd = forward_bag(model, BagView{bag}, top_j, attention);
        for (int s = 0; s < kNumGrades; ++s) {
            const bool pred = fwd.bag_probs[static_cast<std::size_t>(s)] > threshold;
            const bool truth = bag->target[static_cast<std::size_t>(s)] != 0;
            GradeCounts& c = r.counts[static_cast<std::size_t>(s)];
            if (pred && truth) ++c.tp;
            if (pred && !truth) ++c.fp;
            if (!pred && truth) ++c.fn;
            if (!pred && !truth) ++c.tn;
            if (pred != truth) ++disagreements;
        }
    }
    for (int s = 0; s < kNumGrades; ++s) {
        const GradeCounts& c = r.counts[static_cast<std::size_t>(s)];
        const double denom = static_cast<double>(2 * c.tp + c.fp + c.fn);
        r.f1[static_cast<std::size_t>(s)] =
            denom > 0.0 ? 2.0 * static_cast<double>(c.tp) / denom : 0.0;
        r.macro_f1 += r.f1[static_cast<std::size_t>(s)] / 3.0;
    }
    r.hamming = static_cast<double>(disagreements) / (3.0 * static_cast<double>(bags.size()));
    return r;
}

CrossActivationMatrix cross_activation(const ModelState& model,
                                       std::span<const PdEntry> patches) {
    if (patches.empty()) throw std::domain_error("cross_activation: empty patch set");
    const ModelConfig& mc = model.config;
    const int per = mc.protos_per_class;
    const PrototypeBankView bank = bank_view(model);
    CrossActivationMatrix m;
    for (const PdEntry& entry : patches) {
        const LatentGrid grid = encode(mc.encoder(), model.encoder_params(), entry.patch);
        const PatchForward fwd = forward_patch(grid, bank, model.fc());
        AttentionForward attn;
        attention_forward(mc, model.attention_params(), fwd.similarities, attn);
        const int row = class_index(entry.patch.grade);
        ++m.row_counts[static_cast<std::size_t>(row)];
        for (int col = 0; col < kNumClasses; ++col) {
            double best = 0.0;
            for (int g = col * per; g < (col + 1) * per; ++g) {
                best = std::max(best, attn.weighted[static_cast<std::size_t>(g)]);
            }
            m.values[static_cast<std::size_t>(row)][static_cast<std::size_t>(col)] += best;
        }
    }
    for (int row = 0; row < kNumClasses; ++row) {
        if (m.row_counts[static_cast<std::size_t>(row)] == 0) continue;
        for (int col = 0; col < kNumClasses; ++col) {
            m.values[static_cast<std::size_t>(row)][static_cast<std::size_t>(col)] /=
                static_cast<double>(m.row_counts[static_cast<std::size_t>(row)]);
        }
    }
    return m;
}

LowAttentionFractions low_attention_fraction(const ModelState& model,
                                             std::span<const WsiBag* const> bags, int top_j,
                                             double threshold) {
    const ImportanceReport imp = prototype_importance(model, bags, top_j);
    LowAttentionFractions out;
    out.threshold = threshold;
    long low_total = 0, total = 0;
    for (int s = 0; s < kNumGrades; ++s) {
        const auto& entries = imp.per_grade[static_cast<std::size_t>(s)];
        out.defined[static_cast<std::size_t>(s)] = !entries.empty();
        if (entries.empty()) continue;
        long low = 0;
        for (const auto& e : entries) {
            if (e.score < threshold) ++low;
        }
        out.per_grade[static_cast<std::size_t>(s)] =
            static_cast<double>(low) / static_cast<double>(entries.size());
        low_total += low;
        total += static_cast<long>(entries.size());
    }
    if (total > 0) out.overall = static_cast<double>(low_total) / static_cast<double>(total);
    return out;
}

namespace {

void append_num(std::string& out, double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    out += buf;
}

}  // namespace

std::string eval_csv(const EvalResult& r, const std::string& meta_comment) {
    std::string out;
    if (!meta_comment.empty()) {
        out += "# ";
        out += meta_comment;
        out += '\n';
    }
    out += "grade,f1,tp,fp,fn,tn\n";
    for (int s = 0; s < kNumGrades; ++s) {
        const GradeCounts& c = r.counts[static_cast<std::size_t>(s)];
        out += std::to_string(int(grade_of_slot(s)));
        out += ',';
        append_num(out, r.f1[static_cast<std::size_t>(s)]);
        for (long v : {c.tp, c.fp, c.fn, c.tn}) {
            out += ',';
            out += std::to_string(v);
        }
        out += '\n';
    }
    out += "macro_f1,";
    append_num(out, r.macro_f1);
    out += "\nhamming,";
    append_num(out, r.hamming);
    out += '\n';
    return out;
}

std::string cross_activation_csv(const CrossActivationMatrix& m, const std::string& meta_comment) {
    std::string out;
    if (!meta_comment.empty()) {
        out += "# ";
        out += meta_comment;
        out += '\n';
    }
    out += "true_class,vs_benign,vs_grade3,vs_grade4,vs_grade5,patches\n";
    static const char* kRowNames[] = {"benign", "grade3", "grade4", "grade5"};
    for (int row = 0; row < kNumClasses; ++row) {
        out += kRowNames[row];
        for (int col = 0; col < kNumClasses; ++col) {
            out += ',';
            append_num(out, m.values[static_cast<std::size_t>(row)][static_cast<std::size_t>(col)]);
        }
        out += ',';
        out += std::to_string(m.row_counts[static_cast<std::size_t>(row)]);
        out += '\n';
    }
    return out;
}

}  // namespace adapt
