#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace adapt {

// A named, contiguous slice of a flat parameter vector.
struct Segment {
    std::string name;
    std::size_t offset = 0;
    std::size_t size = 0;

    bool operator==(const Segment&) const = default;
};

// Partition of [0, total) into named segments. Construction validates that the
// segments are contiguous, in order, and non-overlapping.
class ParamLayout {
public:
    ParamLayout() = default;
    explicit ParamLayout(std::vector<Segment> segments);

    std::size_t total() const { return total_; }
    const Segment& segment(std::string_view name) const;  // throws layout_error
    bool has(std::string_view name) const;
    const std::vector<Segment>& segments() const { return segments_; }

    bool operator==(const ParamLayout&) const = default;

private:
    std::vector<Segment> segments_;
    std::size_t total_ = 0;
};

// Flat double vector plus the layout that names its pieces. All model weights
// and all gradients travel through this type.
struct ParamVector {
    ParamLayout layout;
    std::vector<double> values;

    static ParamVector zeros(const ParamLayout& layout);

    std::span<double> segment(std::string_view name);
    std::span<const double> segment(std::string_view name) const;
    void fill_segment(std::string_view name, double v);
    void set_zero();

    bool operator==(const ParamVector&) const = default;
};

// Adam moments. Invariant: second-moment entries stay >= 0.
struct AdamState {
    std::vector<double> first_moment;
    std::vector<double> second_moment;
    long step_count = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    static AdamState init(std::size_t n);
};

// One Adam update in place. Coordinates whose gradient is exactly zero are
// left untouched, moments included; segment freezing relies on this, and it
// makes the zero-gradient fixed point exact. Throws layout_error on shape
// mismatch and numeric_error (naming the segment) on non-finite gradients.
void adam_step(ParamVector& params, const ParamVector& grads, AdamState& state, double lr);

struct LrSchedule {
    double initial_lr = 0.0;   // must be > 0
    long total_steps = 0;      // must be >= 1
    double min_lr_factor = 1e-6;
};

// Cosine annealing from initial_lr to the floor min_lr_factor * initial_lr.
// step must lie in [0, total_steps]; out of range throws std::out_of_range.
double cosine_lr(long step, const LrSchedule& schedule);

// Diagnostics collected while a loss is evaluated: the smallest gap across all
// discrete selections (argmin cells, top-j boundaries, thresholded events) and
// the smallest min-distance reached. Gradient checks only accept draws whose
// margins keep a central difference from flipping any selection.
struct TieReport {
    double selection_margin = std::numeric_limits<double>::infinity();
    double min_distance = std::numeric_limits<double>::infinity();
    bool clamped = false;

    void observe_gap(double gap);
    void observe_distance(double d);
};

struct GradCheckSegment {
    std::string name;
    std::size_t size = 0;
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
};

struct GradCheckReport {
    std::vector<GradCheckSegment> segments;
    double max_rel_err = 0.0;
    double h = 0.0;
    double tol = 0.0;
    bool pass = false;
};

// Central finite differences against an analytic gradient. Relative error per
// coordinate is |num - ana| / max(1, |num|, |ana|); the report carries the
// worst coordinate per segment. Non-finite loss values raise numeric_error
// naming the offending coordinate. Zero-size layouts pass vacuously.
GradCheckReport finite_diff_check(const std::function<double(const ParamVector&)>& loss,
                                  ParamVector params, const ParamVector& analytic,
                                  double h = 1e-5, double tol = 1e-5);

}  // namespace adapt
