#include <doctest.h>

#include <filesystem>

#include "rswm/common/errors.hpp"
#include "rswm/common/rng.hpp"
#include "rswm/tokenizer.hpp"
#include "rswm/worldgen.hpp"

using namespace rswm;
using namespace rswm::tokenizer;

namespace {

std::vector<Image> world_images(int count, std::int64_t first_location) {
    std::vector<Image> out;
    for (int i = 0; i < count; ++i) {
        const auto scene = worldgen::generate_scene(11, first_location + i);
        out.push_back(worldgen::render_observation(scene, worldgen::sample_acquisition(scene, static_cast<std::uint64_t>(i))));
    }
    return out;
}

TokenizerConfig tiny_config() {
    TokenizerConfig c;
    c.codebook_size = 16;
    c.steps = 60;
    c.batch_images = 4;
    c.hidden = 24;
    c.latent_dim = 8;
    return c;
}

// Independent brute force: enumerate every codeword, keep the first strict minimum.
int brute_force_nearest(const std::vector<double>& v, const Mat& codebook) {
    std::vector<double> d(static_cast<std::size_t>(codebook.rows()));
    for (Eigen::Index k = 0; k < codebook.rows(); ++k) {
        double s = 0.0;
        for (Eigen::Index i = 0; i < codebook.cols(); ++i) s += (v[i] - codebook(k, i)) * (v[i] - codebook(k, i));
        d[static_cast<std::size_t>(k)] = s;
    }
    return static_cast<int>(std::min_element(d.begin(), d.end()) - d.begin());
}

} // namespace

TEST_CASE("quantize_latent examples") {
    Mat cb(2, 2);
    cb << 0, 0, 1, 1;
    const std::vector<double> a{0.2, 0.1}, b{1.0, 1.0}, tie{0.5, 0.5}, bad{1.0};
    CHECK(quantize_latent(a, cb).index == 0);
    CHECK(quantize_latent(b, cb).index == 1);
    CHECK(quantize_latent(b, cb).distance == 0.0);
    CHECK(quantize_latent(tie, cb).index == 0);
    CHECK_THROWS_AS(quantize_latent(bad, cb), InvalidInput);
}

TEST_CASE("quantize_latent matches brute force on 1000 random instances") {
    Rng rng(5);
    for (int trial = 0; trial < 1000; ++trial) {
        const int k = static_cast<int>(rng.uniform_int(2, 40));
        const int d = static_cast<int>(rng.uniform_int(1, 12));
        Mat cb(k, d);
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < d; ++j) cb(i, j) = std::round(rng.normal() * 4.0) / 4.0; // coarse grid forces ties
        std::vector<double> v(static_cast<std::size_t>(d));
        for (auto& x : v) x = std::round(rng.normal() * 4.0) / 4.0;
        REQUIRE(quantize_latent(v, cb).index == brute_force_nearest(v, cb));
    }
}

TEST_CASE("straight-through gradients match finite differences") {
    TokenizerConfig c = tiny_config();
    c.hidden = 6;
    c.latent_dim = 3;
    const Network net = Network::init(c, 3);
    const Mat x = image_to_patches(world_images(1, 0)[0], c).leftCols(5);
    Mat codebook(4, c.latent_dim);
    Rng rng(9);
    for (Eigen::Index i = 0; i < codebook.size(); ++i) codebook.data()[i] = rng.normal();
    const Mat e = net.encode(x);
    Mat q(c.latent_dim, x.cols());
    for (Eigen::Index j = 0; j < e.cols(); ++j) q.col(j) = codebook.row(quantize_latent(std::span<const double>(e.col(j).data(), e.rows()), codebook).index).transpose();
    const Mat offset = q - e; // frozen assignment

    Network grad = Network::zeros_like(net);
    composite_loss(net, x, q, offset, 0.25, &grad);

    double worst = 0.0;
    auto check = [&](auto member_of) {
        Network probe = net;
        auto& param = member_of(probe);
        const auto& g = member_of(grad);
        for (Eigen::Index i = 0; i < param.size(); ++i) {
            const double orig = param.data()[i];
            const double h = 1e-6;
            param.data()[i] = orig + h;
            const double up = composite_loss(probe, x, q, offset, 0.25, nullptr);
            param.data()[i] = orig - h;
            const double down = composite_loss(probe, x, q, offset, 0.25, nullptr);
            param.data()[i] = orig;
            const double fd = (up - down) / (2 * h);
            const double rel = std::abs(fd - g.data()[i]) / std::max(1e-6, std::abs(fd) + std::abs(g.data()[i]));
            worst = std::max(worst, rel);
        }
    };
    check([](Network& n) -> Mat& { return n.enc_w1; });
    check([](Network& n) -> Vec& { return n.enc_b1; });
    check([](Network& n) -> Mat& { return n.enc_w2; });
    check([](Network& n) -> Vec& { return n.enc_b2; });
    check([](Network& n) -> Mat& { return n.dec_w1; });
    check([](Network& n) -> Vec& { return n.dec_b1; });
    check([](Network& n) -> Mat& { return n.dec_w2; });
    check([](Network& n) -> Vec& { return n.dec_b2; });
    MESSAGE("worst relative error: " << worst);
    CHECK(worst <= 1e-4);

    // With no commitment term, the encoder output bias receives exactly the
    // gradient with respect to the quantized latent (summed over patches).
    Network g0 = Network::zeros_like(net);
    composite_loss(net, x, q, offset, 0.0, &g0);
    for (Eigen::Index r = 0; r < q.rows(); ++r) {
        double fd_sum = 0.0;
        for (Eigen::Index j = 0; j < q.cols(); ++j) {
            Mat shifted = offset;
            shifted(r, j) += 1e-6;
            const double up = composite_loss(net, x, q, shifted, 0.0, nullptr);
            shifted(r, j) -= 2e-6;
            const double down = composite_loss(net, x, q, shifted, 0.0, nullptr);
            fd_sum += (up - down) / 2e-6;
        }
        CHECK(g0.enc_b2(r) == doctest::Approx(fd_sum).epsilon(1e-5));
    }
}

TEST_CASE("training contract on a tiny config") {
    const auto images = world_images(24, 0);
    const auto c = tiny_config();
    const auto a = train_codebook(images, c, 42);
    const auto b = train_codebook(images, c, 42);
    CHECK(a.to_bytes() == b.to_bytes());
    CHECK(a.codebook().rows() == c.codebook_size);
    CHECK(a.curve().loss.size() == static_cast<std::size_t>(c.steps));
    CHECK(a.curve().loss.back() < a.curve().loss.front());
    CHECK(train_codebook(images, c, 43).to_bytes() != a.to_bytes());

    TokenizerConfig big = c;
    big.codebook_size = 24 * 64 + 1;
    CHECK_THROWS_AS(train_codebook(images, big, 1), InvalidInput);
}

TEST_CASE("encode/decode contract") {
    const auto images = world_images(24, 0);
    const auto tok = train_codebook(images, tiny_config(), 7);
    const auto& c = tok.config();
    for (const auto& img : images) {
        const auto z = tok.encode(img);
        REQUIRE(z.codes.size() == static_cast<std::size_t>(c.sequence_length()));
        for (int code : z.codes) REQUIRE((code >= 0 && code < c.codebook_size));
        REQUIRE(tok.encode(img) == z);
    }
    CHECK_THROWS_AS(tok.encode(Image(16, 16)), InvalidInput);

    const Image flat(32, 32, 0.37f);
    const auto zf = tok.encode(flat);
    CHECK(std::all_of(zf.codes.begin(), zf.codes.end(), [&](int v) { return v == zf.codes[0]; }));

    VisualTokens bad = tok.encode(images[0]);
    bad.codes[3] = c.codebook_size;
    CHECK_THROWS_AS(tok.decode(bad), InvalidInput);
    bad.codes.pop_back();
    CHECK_THROWS_AS(tok.decode(bad), InvalidInput);

    Rng rng(1);
    for (int t = 0; t < 20; ++t) {
        VisualTokens z;
        for (int i = 0; i < c.sequence_length(); ++i) z.codes.push_back(static_cast<int>(rng.uniform_int(0, c.codebook_size - 1)));
        const Image out = tok.decode(z);
        REQUIRE(out.height == 32);
        for (float v : out.pixels) REQUIRE((v >= 0.0f && v <= 1.0f));
    }
}

TEST_CASE("standalone export round-trips byte-stably") {
    const auto tok = train_codebook(world_images(8, 0), tiny_config(), 3);
    const auto path = std::filesystem::temp_directory_path() / "rswm_tok_test.bin";
    tok.save(path);
    const auto loaded = Tokenizer::load(path);
    CHECK(loaded.to_bytes() == tok.to_bytes());
    CHECK(loaded.content_hash() == tok.content_hash());
    const auto img = world_images(1, 100)[0];
    CHECK(loaded.encode(img) == tok.encode(img));
    CHECK(loaded.decode(tok.encode(img)) == tok.decode(tok.encode(img)));

    auto bytes = tok.to_bytes();
    bytes[0] = 'X';
    CHECK_THROWS_AS(Tokenizer::from_bytes(bytes), FormatError);
    bytes = tok.to_bytes();
    bytes.pop_back();
    CHECK_THROWS_AS(Tokenizer::from_bytes(bytes), FormatError);
    std::filesystem::remove(path);
}
