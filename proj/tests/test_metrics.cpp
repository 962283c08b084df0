#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "doctest.h"
#include "emef/image.hpp"
#include "emef/metrics.hpp"
#include "emef/rng.hpp"

using emef::Image;
using emef::Tensor;
using emef::Tape;

namespace {

Image random_image(int h, int w, int c, emef::Rng& rng, float lo = 0.0f, float hi = 1.0f) {
    Image img(h, w, c);
    for (float& v : img.data) v = static_cast<float>(rng.uniform(lo, hi));
    return img;
}

// Brute-force ranking oracle: sort indices by score, walk the sorted order
// and give tied entries the rank of the first of their group.
std::vector<int> rank_oracle(const std::vector<double>& scores, bool higher_better) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return higher_better ? scores[a] > scores[b] : scores[a] < scores[b];
    });
    std::vector<int> ranks(scores.size(), 0);
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
        if (pos > 0 && scores[order[pos]] == scores[order[pos - 1]])
            ranks[order[pos]] = ranks[order[pos - 1]];
        else
            ranks[order[pos]] = static_cast<int>(pos) + 1;
    }
    return ranks;
}

} // namespace

TEST_CASE("ssim identity, symmetry and closed form on constants") {
    emef::Rng rng(201);
    Image a = random_image(24, 24, 3, rng);
    CHECK(emef::ssim(a, a) == doctest::Approx(1.0).epsilon(1e-12));

    Image b = random_image(24, 24, 3, rng);
    CHECK(emef::ssim(a, b) == doctest::Approx(emef::ssim(b, a)).epsilon(1e-12));
    CHECK(emef::ssim(a, b) <= 1.0);
    CHECK(emef::ssim(a, b) >= -1.0);

    Image c5(16, 16, 1, 0.5f);
    Image c7(16, 16, 1, 0.7f);
    const double c1 = 0.01 * 0.01;
    const double expect = (2.0 * 0.5 * 0.7 + c1) / (0.5 * 0.5 + 0.7 * 0.7 + c1);
    CHECK(emef::ssim(c5, c7) == doctest::Approx(expect).epsilon(1e-6));

    CHECK_THROWS_AS(emef::ssim(a, Image(16, 16, 3)), emef::ShapeError);
    CHECK_THROWS_AS(emef::ssim(Image(8, 8, 1), Image(8, 8, 1)), emef::ShapeError);
}

TEST_CASE("mef_ssim equals one for the common image of identical sources") {
    emef::RadianceMap r = emef::synth_radiance(301, 32);
    Image img = emef::expose(r, 0.0f, 2.2f);
    const double score = emef::mef_ssim({img, img}, img);
    CHECK(score == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("mef_ssim ignores a global offset of the fused image") {
    emef::RadianceMap r = emef::synth_radiance(302, 32);
    emef::ExposurePair pair = emef::make_pair(r, 2.0f, -2.0f, 2.2f);
    Image fused(32, 32, 3);
    for (std::size_t i = 0; i < fused.data.size(); ++i)
        fused.data[i] = 0.5f * pair.over.data[i] + 0.5f * pair.under.data[i] * 0.8f;
    Image shifted = fused;
    for (float& v : shifted.data) v = v * 0.8f + 0.1f;
    Image base = fused;
    for (float& v : base.data) v *= 0.8f;
    const double s0 = emef::mef_ssim({pair.over, pair.under}, base);
    const double s1 = emef::mef_ssim({pair.over, pair.under}, shifted);
    CHECK(std::abs(s0 - s1) < 1e-6);
}

TEST_CASE("mef_ssim scores stitched desired patches near one") {
    emef::RadianceMap r = emef::synth_radiance(303, 64);
    emef::ExposurePair pair = emef::make_pair(r, 2.0f, -2.0f, 2.2f);
    std::vector<Tensor<double>> sources = {emef::image_to_tensor<double>(pair.over),
                                           emef::image_to_tensor<double>(pair.under)};
    emef::MefContext<double> ctx = emef::make_mef_context(sources, 8, 8);

    // Tile the desired patches back into an image (stride 8 -> exact tiling)
    // and add a constant, which mean removal must cancel.
    Tensor<double> fused({1, 1, 64, 64});
    double* p = fused.mutable_data();
    const int tiles = 64 / 8;
    for (int ty = 0; ty < tiles; ++ty)
        for (int tx = 0; tx < tiles; ++tx) {
            const int col = ty * tiles + tx;
            for (int i = 0; i < 8; ++i)
                for (int j = 0; j < 8; ++j)
                    p[static_cast<std::size_t>(ty * 8 + i) * 64 + (tx * 8 + j)] =
                        ctx.desired.at({i * 8 + j, col}) + 0.5;
        }
    const double score = emef::mef_ssim_tensor(ctx, fused).value();
    CHECK(score >= 0.999);
}

TEST_CASE("mef_ssim gradient with respect to the fused image matches finite differences") {
    emef::Rng rng(304);
    std::vector<Tensor<double>> sources;
    for (int s = 0; s < 2; ++s) {
        Tensor<double> src({1, 1, 16, 16});
        for (std::size_t i = 0; i < src.numel(); ++i)
            src.mutable_data()[i] = rng.uniform(0.0, 1.0);
        sources.push_back(src);
    }
    emef::MefContext<double> ctx = emef::make_mef_context(sources, 8, 1);

    Tensor<double> fused({1, 1, 16, 16});
    for (std::size_t i = 0; i < fused.numel(); ++i)
        fused.mutable_data()[i] = rng.uniform(0.2, 0.8);

    Tape<double> tape;
    Tensor<double> tracked = fused.on(tape);
    tape.backward(emef::mef_ssim_tensor(ctx, tracked));
    const std::vector<double>& analytic = tracked.grad();

    const double h = 1e-5;
    double* p = fused.mutable_data();
    for (std::size_t i = 0; i < fused.numel(); ++i) {
        const double keep = p[i];
        p[i] = keep + h;
        const double fp = emef::mef_ssim_tensor(ctx, fused).value();
        p[i] = keep - h;
        const double fm = emef::mef_ssim_tensor(ctx, fused).value();
        p[i] = keep;
        const double fd = (fp - fm) / (2.0 * h);
        CHECK(std::abs(analytic[i] - fd) / std::max(std::abs(fd), 1e-2) <= 1e-3);
    }
}

TEST_CASE("entropy examples") {
    Image constant(16, 16, 1, 0.37f);
    CHECK(emef::entropy_en(constant) == 0.0);

    // One pixel of every byte level -> exactly uniform histogram.
    Image uniform(16, 16, 1);
    for (int i = 0; i < 256; ++i) uniform.data[static_cast<std::size_t>(i)] = static_cast<float>(i) / 255.0f;
    CHECK(emef::entropy_en(uniform) == doctest::Approx(8.0).epsilon(1e-12));

    emef::Rng rng(205);
    Image any = random_image(20, 20, 3, rng);
    CHECK(emef::entropy_en(any) >= 0.0);
    CHECK(emef::entropy_en(any) <= 8.0);
}

TEST_CASE("cross entropy is zero against a matching histogram and positive otherwise") {
    emef::Rng rng(206);
    Image a = random_image(24, 24, 3, rng);
    CHECK(emef::cross_entropy_ce({a, a}, a) == doctest::Approx(0.0).epsilon(1e-12));
    Image bright = a;
    for (float& v : bright.data) v = std::min(1.0f, v + 0.25f);
    CHECK(emef::cross_entropy_ce({a}, bright) > 0.0);
}

TEST_CASE("psnr caps at 100 dB for identical images") {
    emef::Rng rng(207);
    Image a = random_image(16, 16, 3, rng);
    CHECK(emef::psnr_fusion({a, a}, a) == 100.0);
    Image noisy = a;
    for (float& v : noisy.data) v = std::clamp(v + 0.1f, 0.0f, 1.0f);
    CHECK(emef::psnr_fusion({a}, noisy) < 100.0);
    CHECK(emef::psnr_fusion({a}, noisy) > 0.0);
}

TEST_CASE("gradient statistics vanish on constant images") {
    Image constant(16, 16, 3, 0.42f);
    CHECK(emef::avg_gradient_ag(constant) == 0.0);
    CHECK(emef::edge_intensity_ei(constant) == 0.0);
    CHECK(emef::spatial_frequency_sf(constant) == 0.0);

    emef::Rng rng(208);
    Image any = random_image(16, 16, 3, rng);
    CHECK(emef::avg_gradient_ag(any) > 0.0);
    CHECK(emef::edge_intensity_ei(any) > 0.0);
    CHECK(emef::spatial_frequency_sf(any) > 0.0);
}

TEST_CASE("qabf scores perfect edge preservation as one") {
    emef::RadianceMap r = emef::synth_radiance(209, 32);
    Image a = emef::expose(r, 0.0f, 2.2f);
    const double q = emef::qabf({a, a}, a);
    CHECK(q == doctest::Approx(1.0).epsilon(1e-3));

    Image blurred = a;
    for (int y = 1; y + 1 < a.height; ++y)
        for (int x = 1; x + 1 < a.width; ++x)
            for (int c = 0; c < 3; ++c)
                blurred.at(y, x, c) = (a.at(y - 1, x, c) + a.at(y + 1, x, c) + a.at(y, x - 1, c) +
                                       a.at(y, x + 1, c) + a.at(y, x, c)) /
                                      5.0f;
    CHECK(emef::qabf({a, a}, blurred) < q);
}

TEST_CASE("competition ranks match a sorting oracle") {
    emef::Rng rng(210);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = rng.uniform_int(2, 8);
        std::vector<double> scores(static_cast<std::size_t>(n));
        for (double& s : scores)
            s = rng.uniform() < 0.3 ? 0.5 : rng.uniform(); // inject ties
        for (bool higher : {true, false}) {
            std::vector<int> got = emef::competition_ranks(scores, higher);
            std::vector<int> want = rank_oracle(scores, higher);
            CHECK(got == want);
        }
    }

    // Hand-computed table: three methods, two metrics (second lower-better).
    emef::MetricReport rep = emef::build_report_from_scores(
        {"alpha", "beta", "gamma"}, {"EN", "CE"},
        {{7.0, 1.0}, {7.5, 3.0}, {7.5, 0.5}});
    CHECK(rep.ranks[0][0] == 3); // EN: 7.0 is worst
    CHECK(rep.ranks[1][0] == 1); // tie at 7.5 shares rank 1
    CHECK(rep.ranks[2][0] == 1);
    CHECK(rep.ranks[0][1] == 2); // CE lower is better
    CHECK(rep.ranks[1][1] == 3);
    CHECK(rep.ranks[2][1] == 1);
    CHECK(rep.overall[0] == 5);
    CHECK(rep.overall[1] == 4);
    CHECK(rep.overall[2] == 2);
}

TEST_CASE("report ranks are valid permutations when scores are distinct") {
    emef::Rng rng(211);
    std::vector<Image> sources = {random_image(16, 16, 3, rng), random_image(16, 16, 3, rng)};
    std::vector<std::pair<std::string, Image>> methods;
    for (int m = 0; m < 3; ++m)
        methods.emplace_back("m" + std::to_string(m), random_image(16, 16, 3, rng));
    emef::MetricReport rep = emef::build_report(methods, sources, {"EN", "PSNR", "AG"});
    REQUIRE(rep.methods.size() == 3);
    REQUIRE(rep.metrics.size() == 3);
    for (std::size_t m = 0; m < rep.metrics.size(); ++m) {
        std::vector<int> column;
        for (std::size_t i = 0; i < rep.methods.size(); ++i) column.push_back(rep.ranks[i][m]);
        std::vector<int> sorted = column;
        std::sort(sorted.begin(), sorted.end());
        CHECK(sorted == std::vector<int>{1, 2, 3});
    }
    for (std::size_t i = 0; i < rep.methods.size(); ++i) {
        int sum = 0;
        for (std::size_t m = 0; m < rep.metrics.size(); ++m) sum += rep.ranks[i][m];
        CHECK(rep.overall[i] == sum);
    }

    std::string csv = emef::report_csv(rep);
    CHECK(csv.find("method,EN,EN_rank,PSNR,PSNR_rank,AG,AG_rank,overall_rank") == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
    std::string text = emef::report_text(rep);
    CHECK(text.find("overall") != std::string::npos);
    CHECK(text.find("(1)") != std::string::npos);
}

TEST_CASE("metric dispatch covers the published set and rejects unknowns") {
    emef::Rng rng(212);
    std::vector<Image> sources = {random_image(16, 16, 3, rng), random_image(16, 16, 3, rng)};
    Image fused = random_image(16, 16, 3, rng);
    for (const std::string& name : emef::default_metric_names())
        CHECK(std::isfinite(emef::eval_metric(name, sources, fused)));
    CHECK_THROWS_AS(emef::eval_metric("NOPE", sources, fused), emef::ShapeError);
    CHECK(emef::metric_lower_is_better("CE"));
    CHECK(!emef::metric_lower_is_better("EN"));
}
