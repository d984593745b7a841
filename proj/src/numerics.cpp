#include "adapt/numerics.hpp"

#include <algorithm>
#include <cmath>

#include "adapt/common.hpp"

namespace adapt {

namespace {
constexpr double kPi = 3.1415926535897932384626433832795;
}

ParamLayout::ParamLayout(std::vector<Segment> segments) : segments_(std::move(segments)) {
    std::size_t expect = 0;
    for (const auto& s : segments_) {
        if (s.name.empty()) throw layout_error("segment with empty name");
        if (s.offset != expect) {
            throw layout_error("segment '" + s.name + "' offset " + std::to_string(s.offset) +
                               " leaves a gap (expected " + std::to_string(expect) + ")");
        }
        for (const auto& other : segments_) {
            if (&other != &s && other.name == s.name) {
                throw layout_error("duplicate segment name '" + s.name + "'");
            }
        }
        expect += s.size;
    }
    total_ = expect;
}

const Segment& ParamLayout::segment(std::string_view name) const {
    for (const auto& s : segments_) {
        if (s.name == name) return s;
    }
    throw layout_error("unknown segment '" + std::string(name) + "'");
}

bool ParamLayout::has(std::string_view name) const {
    for (const auto& s : segments_) {
        if (s.name == name) return true;
    }
    return false;
}

ParamVector ParamVector::zeros(const ParamLayout& layout) {
    ParamVector v;
    v.layout = layout;
    v.values.assign(layout.total(), 0.0);
    return v;
}

std::span<double> ParamVector::segment(std::string_view name) {
    const Segment& s = layout.segment(name);
    return std::span<double>(values).subspan(s.offset, s.size);
}

std::span<const double> ParamVector::segment(std::string_view name) const {
    const Segment& s = layout.segment(name);
    return std::span<const double>(values).subspan(s.offset, s.size);
}

void ParamVector::fill_segment(std::string_view name, double v) {
    for (double& x : segment(name)) x = v;
}

void ParamVector::set_zero() { std::fill(values.begin(), values.end(), 0.0); }

AdamState AdamState::init(std::size_t n) {
    AdamState s;
    s.first_moment.assign(n, 0.0);
    s.second_moment.assign(n, 0.0);
    return s;
}

void adam_step(ParamVector& params, const ParamVector& grads, AdamState& state, double lr) {
    if (params.layout != grads.layout || params.values.size() != grads.values.size()) {
        throw layout_error("adam_step: parameter and gradient layouts differ");
    }
    if (state.first_moment.size() != params.values.size() ||
        state.second_moment.size() != params.values.size()) {
        throw layout_error("adam_step: optimizer state size mismatch");
    }
    if (!(lr > 0.0)) throw std::domain_error("adam_step: learning rate must be positive");

    for (const auto& seg : grads.layout.segments()) {
        for (std::size_t i = seg.offset; i < seg.offset + seg.size; ++i) {
            if (!std::isfinite(grads.values[i])) {
                throw numeric_error("non-finite gradient in segment '" + seg.name +
                                    "' at local index " + std::to_string(i - seg.offset));
            }
        }
    }

    state.step_count += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
    for (std::size_t i = 0; i < params.values.size(); ++i) {
        const double g = grads.values[i];
        if (g == 0.0) continue;  // untouched, moments included (see header)
        double& m = state.first_moment[i];
        double& v = state.second_moment[i];
        m = state.beta1 * m + (1.0 - state.beta1) * g;
        v = state.beta2 * v + (1.0 - state.beta2) * g * g;
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        params.values[i] -= lr * mhat / (std::sqrt(vhat) + state.epsilon);
    }
}

double cosine_lr(long step, const LrSchedule& schedule) {
    if (!(schedule.initial_lr > 0.0)) throw std::domain_error("cosine_lr: initial_lr must be > 0");
    if (schedule.total_steps < 1) throw std::domain_error("cosine_lr: total_steps must be >= 1");
    if (step < 0 || step > schedule.total_steps) {
        throw std::out_of_range("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                                std::to_string(schedule.total_steps) + "]");
    }
    const double floor_lr = schedule.min_lr_factor * schedule.initial_lr;
    const double t = static_cast<double>(step) / static_cast<double>(schedule.total_steps);
    const double lr = schedule.initial_lr * 0.5 * (1.0 + std::cos(kPi * t));
    return std::max(lr, floor_lr);
}

void TieReport::observe_gap(double gap) { selection_margin = std::min(selection_margin, gap); }

void TieReport::observe_distance(double d) { min_distance = std::min(min_distance, d); }

GradCheckReport finite_diff_check(const std::function<double(const ParamVector&)>& loss,
                                  ParamVector params, const ParamVector& analytic, double h,
                                  double tol) {
    if (params.layout != analytic.layout) {
        throw layout_error("finite_diff_check: analytic gradient layout differs from parameters");
    }
    if (!(h > 0.0)) throw std::domain_error("finite_diff_check: step must be positive");

    GradCheckReport report;
    report.h = h;
    report.tol = tol;
    for (const auto& seg : params.layout.segments()) {
        GradCheckSegment sr;
        sr.name = seg.name;
        sr.size = seg.size;
        for (std::size_t k = 0; k < seg.size; ++k) {
            const std::size_t i = seg.offset + k;
            const double saved = params.values[i];
            params.values[i] = saved + h;
            const double up = loss(params);
            params.values[i] = saved - h;
            const double down = loss(params);
            params.values[i] = saved;
            if (!std::isfinite(up) || !std::isfinite(down)) {
                throw numeric_error("finite_diff_check: non-finite loss perturbing segment '" +
                                    seg.name + "' coordinate " + std::to_string(k));
            }
            const double numeric = (up - down) / (2.0 * h);
            const double ana = analytic.values[i];
            const double denom = std::max({1.0, std::fabs(numeric), std::fabs(ana)});
            const double rel = std::fabs(numeric - ana) / denom;
            if (rel > sr.max_rel_err) {
                sr.max_rel_err = rel;
                sr.worst_index = k;
            }
        }
        report.max_rel_err = std::max(report.max_rel_err, sr.max_rel_err);
        report.segments.push_back(std::move(sr));
    }
    report.pass = report.max_rel_err <= tol;
    return report;
}

}  // namespace adapt
