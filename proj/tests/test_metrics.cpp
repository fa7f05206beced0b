#include <catch2/catch_amalgamated.hpp>

#include "gradcheck.hpp"
#include "tucl/metrics.hpp"
#include "tucl/phantom.hpp"

using namespace tucl;

namespace {

std::vector<double> random_binary(int64_t n, double p, RngStream& rng) {
    std::vector<double> v(static_cast<size_t>(n));
    for (double& x : v) x = rng.next_double() < p ? 1.0 : 0.0;
    return v;
}

// Exhaustive symmetric 95th-percentile surface distance, written from the
// definition with no shared helpers beyond the surface extraction rule.
double brute_hd95(const std::vector<double>& a, const std::vector<double>& b, Dims3 dm,
                  double spacing) {
    auto surface = [&](const std::vector<double>& m) {
        std::vector<std::array<double, 3>> out;
        auto at = [&](int64_t x, int64_t y, int64_t z) -> double {
            if (x < 0 || y < 0 || z < 0 || x >= dm.w || y >= dm.h || z >= dm.d) return 0.0;
            return m[static_cast<size_t>((x * dm.h + y) * dm.d + z)];
        };
        for (int64_t x = 0; x < dm.w; ++x)
            for (int64_t y = 0; y < dm.h; ++y)
                for (int64_t z = 0; z < dm.d; ++z) {
                    if (at(x, y, z) == 0.0) continue;
                    if (at(x - 1, y, z) == 0.0 || at(x + 1, y, z) == 0.0 ||
                        at(x, y - 1, z) == 0.0 || at(x, y + 1, z) == 0.0 ||
                        at(x, y, z - 1) == 0.0 || at(x, y, z + 1) == 0.0)
                        out.push_back({static_cast<double>(x), static_cast<double>(y),
                                       static_cast<double>(z)});
                }
        return out;
    };
    auto directed = [](const std::vector<std::array<double, 3>>& from,
                       const std::vector<std::array<double, 3>>& to) {
        std::vector<double> d;
        for (const auto& p : from) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& q : to)
                best = std::min(best, std::hypot(p[0] - q[0], p[1] - q[1], p[2] - q[2]));
            d.push_back(best);
        }
        std::sort(d.begin(), d.end());
        if (d.size() == 1) return d[0];
        const double pos = 0.95 * static_cast<double>(d.size() - 1);
        const size_t lo = static_cast<size_t>(pos);
        if (lo + 1 >= d.size()) return d.back();
        return d[lo] + (pos - static_cast<double>(lo)) * (d[lo + 1] - d[lo]);
    };
    auto sa = surface(a);
    auto sb = surface(b);
    if (sa.empty() && sb.empty()) return 0.0;
    if (sa.empty() || sb.empty())
        return spacing * std::sqrt(static_cast<double>(dm.w * dm.w + dm.h * dm.h + dm.d * dm.d));
    return spacing * std::max(directed(sa, sb), directed(sb, sa));
}

RegionMask phantom_truth(uint64_t seed) {
    PhantomSpec s;
    s.dims = {8, 8, 8};
    s.center = {4.0, 4.0, 4.0};
    s.radii = {3.0, 2.0, 1.0};
    s.seed = seed;
    return generate_phantom(s).second;
}

} // namespace

TEST_CASE("dice closed forms") {
    REQUIRE(dice_percent({1, 1, 0, 0}, {1, 1, 0, 0}) == 100.0);
    REQUIRE(dice_percent({1, 1, 0, 0}, {0, 0, 1, 1}) == 0.0);
    REQUIRE(dice_percent({0, 0, 0}, {0, 0, 0}) == 100.0);
    REQUIRE_THAT(dice_percent({1, 1, 0, 0}, {1, 0, 1, 0}),
                 Catch::Matchers::WithinAbs(50.0, 1e-12));
    REQUIRE_THROWS_AS(dice_percent({0.5, 0.5}, {1, 0}), contract_error);
    REQUIRE_THROWS_AS(dice_percent({1, 0}, {1, 0, 1}), shape_error);
}

TEST_CASE("dice is symmetric and invariant under common translation") {
    RngStream rng = RngStream::derive(1, "test/dice");
    std::vector<double> a = random_binary(512, 0.3, rng);
    std::vector<double> b = random_binary(512, 0.3, rng);
    REQUIRE(dice_percent(a, b) == dice_percent(b, a));

    // Translate both masks one voxel along z inside an 8x8x8 grid.
    std::vector<double> at(512, 0.0), bt(512, 0.0);
    for (size_t i = 0; i < 512; ++i) {
        if (i % 8 == 7) continue;
        at[i + 1] = a[i];
        bt[i + 1] = b[i];
    }
    std::vector<double> a_clip(a), b_clip(b);
    for (size_t i = 0; i < 512; i += 8) a_clip[i + 7] = b_clip[i + 7] = 0.0;
    REQUIRE_THAT(dice_percent(at, bt),
                 Catch::Matchers::WithinAbs(dice_percent(a_clip, b_clip), 1e-12));
}

TEST_CASE("hd95 closed forms") {
    const Dims3 dm{8, 8, 8};
    std::vector<double> empty(512, 0.0);
    std::vector<double> one(512, 0.0);
    one[0] = 1.0;
    std::vector<double> shifted(512, 0.0);
    shifted[3] = 1.0; // (0,0,3): distance 3 from (0,0,0)

    REQUIRE(hd95(empty, empty, dm) == 0.0);
    REQUIRE_THAT(hd95(one, empty, dm),
                 Catch::Matchers::WithinAbs(std::sqrt(3.0 * 64.0), 1e-12));
    REQUIRE(hd95(one, one, dm) == 0.0);
    REQUIRE_THAT(hd95(one, shifted, dm), Catch::Matchers::WithinAbs(3.0, 1e-12));
    REQUIRE_THAT(hd95(one, shifted, dm, 2.5), Catch::Matchers::WithinAbs(7.5, 1e-12));
}

TEST_CASE("dice and hd95 match brute-force oracles on random masks") {
    const Dims3 dm{8, 8, 8};
    RngStream rng = RngStream::derive(2, "test/hd");
    for (int trial = 0; trial < 25; ++trial) {
        std::vector<double> a = random_binary(dm.voxels(), 0.2, rng);
        std::vector<double> b = random_binary(dm.voxels(), 0.2, rng);
        double inter = 0.0, sa = 0.0, sb = 0.0;
        for (size_t i = 0; i < a.size(); ++i) {
            inter += a[i] * b[i];
            sa += a[i];
            sb += b[i];
        }
        const double expect_dice = sa + sb == 0.0 ? 100.0 : 200.0 * inter / (sa + sb);
        REQUIRE_THAT(dice_percent(a, b), Catch::Matchers::WithinAbs(expect_dice, 1e-9));
        REQUIRE_THAT(hd95(a, b, dm), Catch::Matchers::WithinAbs(brute_hd95(a, b, dm, 1.0), 1e-9));
    }
}

TEST_CASE("bland_altman closed form") {
    // diffs: 1, 3 -> bias 2, sample std sqrt(2)
    BlandAltman ba = bland_altman({2.0, 5.0}, {1.0, 2.0});
    REQUIRE_THAT(ba.bias, Catch::Matchers::WithinAbs(2.0, 1e-12));
    REQUIRE_THAT(ba.upper, Catch::Matchers::WithinAbs(2.0 + 1.96 * std::sqrt(2.0), 1e-12));
    REQUIRE_THAT(ba.lower, Catch::Matchers::WithinAbs(2.0 - 1.96 * std::sqrt(2.0), 1e-12));
    REQUIRE_THROWS_AS(bland_altman({1.0}, {1.0}), param_error);
}

TEST_CASE("pearson_r closed forms") {
    REQUIRE_THAT(pearson_r({1, 2, 3}, {2, 4, 6}), Catch::Matchers::WithinAbs(1.0, 1e-12));
    REQUIRE_THAT(pearson_r({1, 2, 3}, {6, 4, 2}), Catch::Matchers::WithinAbs(-1.0, 1e-12));
    REQUIRE_THROWS_AS(pearson_r({1, 1, 1}, {1, 2, 3}), param_error);

    // Against a direct covariance computation on random data.
    RngStream rng = RngStream::derive(3, "test/pearson");
    std::vector<double> a(50), b(50);
    for (size_t i = 0; i < 50; ++i) {
        a[i] = rng.next_normal();
        b[i] = 0.5 * a[i] + rng.next_normal();
    }
    double ma = 0, mb = 0;
    for (size_t i = 0; i < 50; ++i) { ma += a[i]; mb += b[i]; }
    ma /= 50; mb /= 50;
    double sab = 0, saa = 0, sbb = 0;
    for (size_t i = 0; i < 50; ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    REQUIRE_THAT(pearson_r(a, b),
                 Catch::Matchers::WithinAbs(sab / std::sqrt(saa * sbb), 1e-12));
}

TEST_CASE("seg_loss closed forms and gradient") {
    RegionMask y = phantom_truth(4);
    SECTION("perfect prediction is near zero") {
        Tensor y_hat = Tensor::from_data(y.values.shape(), y.values.data());
        const double v = seg_loss(y_hat, y).item();
        REQUIRE(v >= 0.0);
        REQUIRE(v < 1e-3);
    }
    SECTION("requires binarized truth and matching shapes") {
        Tensor y_hat = Tensor::full(y.values.shape(), 0.5);
        RegionMask soft = y;
        soft.binarized = false;
        REQUIRE_THROWS_AS(seg_loss(y_hat, soft), contract_error);
        REQUIRE_THROWS_AS(seg_loss(Tensor::full({3, 4, 4, 4}, 0.5), y), shape_error);
    }
    SECTION("matches an independently coded oracle") {
        const int64_t n = y.dims().voxels();
        RngStream rng = RngStream::derive(5, "test/seg");
        std::vector<double> pd(static_cast<size_t>(3 * n));
        for (double& v : pd) v = 0.05 + 0.9 * rng.next_double();
        Tensor y_hat = Tensor::from_data(y.values.shape(), pd);
        double acc = 0.0;
        const double smooth = 1e-5;
        for (int c = 0; c < 3; ++c) {
            double inter = 0, sp = 0, st = 0, bce = 0;
            for (int64_t i = 0; i < n; ++i) {
                const double p = pd[static_cast<size_t>(c * n + i)];
                const double t = y.values.data()[c * n + i];
                inter += p * t;
                sp += p;
                st += t;
                bce -= t * std::log(p) + (1 - t) * std::log(1 - p);
            }
            const double dice_loss = 1.0 - (2 * inter + smooth) / (sp + st + smooth);
            acc += 0.5 * (dice_loss + bce / static_cast<double>(n));
        }
        REQUIRE_THAT(seg_loss(y_hat, y).item(),
                     Catch::Matchers::WithinAbs(acc / 3.0, 1e-12));
    }
    SECTION("gradient vs finite differences") {
        const int64_t n = y.dims().voxels();
        RngStream rng = RngStream::derive(6, "test/seggrad");
        std::vector<double> pd(static_cast<size_t>(3 * n));
        for (double& v : pd) v = 0.2 + 0.6 * rng.next_double();
        Tensor y_hat = Tensor::from_data(y.values.shape(), pd, true);
        auto res = gradcheck::check({y_hat}, [&] { return seg_loss(y_hat, y); }, 1e-5, 17);
        REQUIRE(res.max_rel_err < 1e-3);
    }
}

TEST_CASE("total_loss combines parts with lambda gradients") {
    Tensor a = Tensor::scalar(0.4, true);
    Tensor b = Tensor::scalar(0.3, true);
    Tensor c = Tensor::scalar(0.2, true);
    LossWeights w;
    w.lambda1 = 1.0;
    w.lambda2 = 0.1;
    w.lambda3 = 0.5;
    Tensor total = total_loss(a, b, c, w);
    REQUIRE_THAT(total.item(), Catch::Matchers::WithinAbs(0.4 + 0.03 + 0.1, 1e-12));
    backward(total);
    REQUIRE(a.grad()[0] == 1.0);
    REQUIRE(b.grad()[0] == 0.1);
    REQUIRE(c.grad()[0] == 0.5);

    Tensor bad = Tensor::scalar(std::numeric_limits<double>::quiet_NaN());
    REQUIRE_THROWS_MATCHES(total_loss(a, bad, c, w), numeric_error,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("L_TPA")));
    LossWeights zero;
    zero.lambda1 = zero.lambda2 = zero.lambda3 = 0.0;
    REQUIRE_THROWS_AS(total_loss(a, b, c, zero), param_error);
}

TEST_CASE("case_metrics and aggregate_report") {
    RegionMask truth = phantom_truth(7);
    RegionMask pred = phantom_truth(7);
    auto perfect = case_metrics(pred, truth, 1.0);
    for (const auto& r : perfect) {
        REQUIRE(r.dice == 100.0);
        REQUIRE(r.hd95_mm == 0.0);
        REQUIRE(r.pred_volume == r.true_volume);
    }

    // Spacing scales volumes cubically and distances linearly.
    auto scaled = case_metrics(pred, truth, 2.0);
    REQUIRE(scaled[0].true_volume == 8.0 * perfect[0].true_volume);

    RegionMask other = phantom_truth(8);
    auto noisy = case_metrics(other, truth, 1.0);
    EvalReport rep = aggregate_report({"a", "b"}, {perfect, noisy}, 1.0);
    for (int c = 0; c < 3; ++c) {
        REQUIRE_THAT(rep.mean_dice[static_cast<size_t>(c)],
                     Catch::Matchers::WithinAbs(
                         (perfect[static_cast<size_t>(c)].dice + noisy[static_cast<size_t>(c)].dice) / 2.0,
                         1e-12));
    }
    REQUIRE_THAT(rep.ave_dice,
                 Catch::Matchers::WithinAbs((rep.mean_dice[0] + rep.mean_dice[1] + rep.mean_dice[2]) / 3.0,
                                            1e-12));
    REQUIRE(rep.agreement[0].has_value());
    REQUIRE_THROWS_AS(aggregate_report({}, {}, 1.0), param_error);
}
