#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "adapt/encoder.hpp"
#include "adapt/numerics.hpp"
#include "adapt/rng.hpp"

using namespace adapt;

namespace {

RawPatch make_patch(int rows, int cols, int depth, SplitRng& rng) {
    RawPatch p;
    p.rows = rows;
    p.cols = cols;
    p.depth = depth;
    p.cells.resize(static_cast<std::size_t>(rows * cols * depth));
    p.cell_grades.assign(static_cast<std::size_t>(rows * cols), 0);
    for (double& v : p.cells) v = rng.normal();
    return p;
}

}  // namespace

TEST_CASE("zero parameters produce a zero latent grid") {
    const EncoderConfig cfg{4, 6, 3};
    const std::vector<double> params(cfg.param_count(), 0.0);
    SplitRng rng = SplitRng::stream(1, "test");
    const RawPatch patch = make_patch(2, 2, 4, rng);
    const LatentGrid grid = encode(cfg, params, patch);
    CHECK(grid.rows == 2);
    CHECK(grid.cols == 2);
    CHECK(grid.depth == 3);
    for (double v : grid.values) CHECK(v == 0.0);
}

TEST_CASE("identity-shaped weights pass positive inputs straight through") {
    // d_raw == d_hidden == d_latent with identity W1, W2 and zero biases turns
    // the network into ReLU, which is the identity on positive cells.
    const EncoderConfig cfg{3, 3, 3};
    std::vector<double> params(cfg.param_count(), 0.0);
    for (int i = 0; i < 3; ++i) {
        params[static_cast<std::size_t>(i * 3 + i)] = 1.0;                  // w1
        params[static_cast<std::size_t>(3 * 3 + 3 + i * 3 + i)] = 1.0;     // w2
    }
    RawPatch patch;
    patch.rows = 1;
    patch.cols = 2;
    patch.depth = 3;
    patch.cells = {0.5, 1.5, 2.0, 0.25, 3.0, 0.125};
    patch.cell_grades = {0, 0};
    const LatentGrid grid = encode(cfg, params, patch);
    for (std::size_t i = 0; i < patch.cells.size(); ++i) {
        CHECK(grid.values[i] == doctest::Approx(patch.cells[i]).epsilon(1e-12));
    }

    // A negative component is clipped by the rectifier.
    patch.cells[1] = -1.0;
    const LatentGrid clipped = encode(cfg, params, patch);
    CHECK(clipped.values[1] == 0.0);
}

TEST_CASE("cells encode independently and identically") {
    const EncoderConfig cfg{5, 7, 4};
    std::vector<double> params(cfg.param_count());
    SplitRng rng = SplitRng::stream(2, "test");
    init_encoder(cfg, rng, params);
    RawPatch patch = make_patch(2, 3, 5, rng);
    const LatentGrid grid = encode(cfg, params, patch);

    // Swapping two cells swaps their latents and changes nothing else.
    RawPatch swapped = patch;
    for (int d = 0; d < 5; ++d) {
        std::swap(swapped.cell(0, 0)[static_cast<std::size_t>(d)],
                  swapped.cell(1, 2)[static_cast<std::size_t>(d)]);
    }
    const LatentGrid sg = encode(cfg, params, swapped);
    for (int d = 0; d < 4; ++d) {
        CHECK(sg.cell(0, 0)[static_cast<std::size_t>(d)] ==
              grid.cell(1, 2)[static_cast<std::size_t>(d)]);
        CHECK(sg.cell(1, 2)[static_cast<std::size_t>(d)] ==
              grid.cell(0, 0)[static_cast<std::size_t>(d)]);
        CHECK(sg.cell(0, 1)[static_cast<std::size_t>(d)] ==
              grid.cell(0, 1)[static_cast<std::size_t>(d)]);
    }
}

TEST_CASE("initialization respects the per-layer bounds with zero biases") {
    const EncoderConfig cfg{16, 32, 24};
    std::vector<double> params(cfg.param_count());
    SplitRng rng = SplitRng::stream(3, "test");
    init_encoder(cfg, rng, params);
    const double bound1 = std::sqrt(6.0 / (16 + 32));
    const double bound2 = std::sqrt(6.0 / (32 + 24));
    std::size_t i = 0;
    for (; i < 16u * 32u; ++i) CHECK(std::abs(params[i]) <= bound1);
    for (; i < 16u * 32u + 32u; ++i) CHECK(params[i] == 0.0);
    for (; i < 16u * 32u + 32u + 32u * 24u; ++i) CHECK(std::abs(params[i]) <= bound2);
    for (; i < params.size(); ++i) CHECK(params[i] == 0.0);

    // Weights actually spread out instead of collapsing to a constant.
    double mn = 1e300, mx = -1e300;
    for (std::size_t k = 0; k < 16u * 32u; ++k) {
        mn = std::min(mn, params[k]);
        mx = std::max(mx, params[k]);
    }
    CHECK(mx - mn > bound1);
}

TEST_CASE("encode_backward matches finite differences") {
    const EncoderConfig cfg{4, 5, 3};
    SplitRng rng = SplitRng::stream(4, "test");
    const RawPatch patch = make_patch(2, 2, 4, rng);

    ParamVector params = ParamVector::zeros(ParamLayout{{{"enc", 0, cfg.param_count()}}});
    init_encoder(cfg, rng, std::span<double>(params.values));

    // Loss: weighted sum of latents, with fixed weights so it is linear in the
    // encoder output but nonlinear in the parameters.
    std::vector<double> w(static_cast<std::size_t>(patch.cell_count() * 3));
    for (double& v : w) v = rng.normal();

    const auto loss = [&](const ParamVector& pv) {
        const LatentGrid g = encode(cfg, pv.values, patch);
        double s = 0;
        for (std::size_t i = 0; i < g.values.size(); ++i) s += w[i] * g.values[i];
        return s;
    };

    std::vector<double> hidden(static_cast<std::size_t>(patch.cell_count() * 5));
    std::vector<double> latent(static_cast<std::size_t>(patch.cell_count() * 3));
    encode_cells(cfg, params.values, patch.cells, patch.cell_count(), latent, hidden);
    ParamVector analytic = ParamVector::zeros(params.layout);
    encode_backward(cfg, params.values, patch.cells, patch.cell_count(), hidden, w,
                    analytic.values);

    const GradCheckReport rep = finite_diff_check(loss, params, analytic);
    CHECK(rep.pass);
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("encoder config validation") {
    CHECK_THROWS_AS((EncoderConfig{0, 4, 4}.validate()), config_error);
    CHECK_THROWS_AS((EncoderConfig{4, 0, 4}.validate()), config_error);
    CHECK_THROWS_AS((EncoderConfig{4, 4, 0}.validate()), config_error);
    CHECK_NOTHROW((EncoderConfig{4, 4, 4}.validate()));
    CHECK((EncoderConfig{2, 3, 4}.param_count()) == 2u * 3u + 3u + 3u * 4u + 4u);
}
