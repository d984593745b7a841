#include "adapt/training.hpp"

#include <cstdio>

namespace adapt {

std::vector<BagView> make_bag_views(std::span<const WsiBag> bags) {
    std::vector<BagView> views;
    views.reserve(bags.size());
    for (const auto& b : bags) views.push_back(BagView{&b});
    return views;
}

std::vector<BagView> make_bag_views(std::span<const WsiBag* const> bags) {
    std::vector<BagView> views;
    views.reserve(bags.size());
    for (const WsiBag* b : bags) views.push_back(BagView{b});
    return views;
}

namespace {

void append_num(std::string& out, double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    out += buf;
}

void append_meta(std::string& out, const std::string& meta_comment) {
    if (meta_comment.empty()) return;
    out += "# ";
    out += meta_comment;
    out += '\n';
}

}  // namespace

std::string stage1_csv(const TrainReport& report, const std::string& meta_comment) {
    std::string out;
    append_meta(out, meta_comment);
    out += "epoch,phase,ce,clst,sep,total,accuracy\n";
    for (const auto& r : report.stage1_rows) {
        out += std::to_string(r.epoch);
        out += ',';
        out += r.phase;
        for (double v : {r.ce, r.clst, r.sep, r.total, r.accuracy}) {
            out += ',';
            append_num(out, v);
        }
        out += '\n';
    }
    return out;
}

std::string stage2_csv(const TrainReport& report, const std::string& meta_comment) {
    std::string out;
    append_meta(out, meta_comment);
    out += "epoch,bce,align,repel,total,val_macro_f1,val_hamming\n";
    for (const auto& r : report.stage2_rows) {
        out += std::to_string(r.epoch);
        for (double v : {r.bce, r.align, r.repel, r.total, r.val_f1, r.val_hamming}) {
            out += ',';
            append_num(out, v);
        }
        out += '\n';
    }
    return out;
}

std::string stage3_csv(const TrainReport& report, const std::string& meta_comment) {
    std::string out;
    append_meta(out, meta_comment);
    out += "epoch,bce,attn,attn_g3,attn_g4,attn_g5,total,val_macro_f1,val_hamming\n";
    for (const auto& r : report.stage3_rows) {
        out += std::to_string(r.epoch);
        for (double v : {r.bce, r.attn, r.per_grade[0], r.per_grade[1], r.per_grade[2], r.total,
                         r.val_f1, r.val_hamming}) {
            out += ',';
            append_num(out, v);
        }
        out += '\n';
    }
    return out;
}

}  // namespace adapt
