#include <catch_amalgamated.hpp>

#include <cmath>

#include "mega/objectives.hpp"
#include "mega/rng.hpp"

using namespace mega;

namespace {

std::vector<double> rand_vec(int d, Rng& rng, double lo = -2.0, double hi = 2.0) {
    std::vector<double> v(static_cast<std::size_t>(d));
    for (double& x : v) x = rng.uniform(lo, hi);
    return v;
}

Tensor row_tensor(const std::vector<double>& v) {
    Tensor t({1, static_cast<int>(v.size())});
    t.data = v;
    return t;
}

// random orthogonal matrix via Gram-Schmidt on a random square matrix
std::vector<std::vector<double>> random_orthogonal(int d, Rng& rng) {
    std::vector<std::vector<double>> q;
    for (int i = 0; i < d; ++i) {
        std::vector<double> v = rand_vec(d, rng, -1, 1);
        for (const auto& u : q) {
            double dot = 0;
            for (int j = 0; j < d; ++j) dot += v[static_cast<std::size_t>(j)] * u[static_cast<std::size_t>(j)];
            for (int j = 0; j < d; ++j) v[static_cast<std::size_t>(j)] -= dot * u[static_cast<std::size_t>(j)];
        }
        double norm = 0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        for (double& x : v) x /= norm;
        q.push_back(v);
    }
    return q;
}

std::vector<double> rotate(const std::vector<std::vector<double>>& q, const std::vector<double>& v) {
    std::vector<double> out(v.size(), 0.0);
    for (std::size_t i = 0; i < v.size(); ++i)
        for (std::size_t j = 0; j < v.size(); ++j) out[i] += q[i][j] * v[j];
    return out;
}

}  // namespace

TEST_CASE("adv triplet loss worked examples") {
    REQUIRE_THAT(adv_triplet_loss({0, 0}, {3, 4}, {0, 0}, 1.0), Catch::Matchers::WithinAbs(6.0, 1e-12));
    // anchor == negative, positive at distance 1, margin 1: hinge at exactly 0
    REQUIRE(adv_triplet_loss({0, 0}, {0, 0}, {1, 0}, 1.0) == 0.0);
    REQUIRE_THROWS_AS(adv_triplet_loss({0, 0}, {1, 2, 3}, {0, 0}, 1.0), FatalError);
    REQUIRE_THROWS_AS(adv_triplet_loss({0, 0}, {1, 2}, {0, 0}, -1.0), FatalError);
}

TEST_CASE("adv triplet loss is nonnegative and zero beyond the margin") {
    Rng rng(101);
    for (int i = 0; i < 200; ++i) {
        auto a = rand_vec(4, rng), n = rand_vec(4, rng), p = rand_vec(4, rng);
        REQUIRE(adv_triplet_loss(a, n, p, 1.0) >= 0.0);
    }
    // ||a-n|| + m <= ||a-p||  ->  exactly zero
    REQUIRE(adv_triplet_loss({0, 0}, {1, 0}, {5, 0}, 1.0) == 0.0);
}

TEST_CASE("adv triplet loss invariant under common rotation") {
    Rng rng(102);
    auto q = random_orthogonal(5, rng);
    for (int i = 0; i < 20; ++i) {
        auto a = rand_vec(5, rng), n = rand_vec(5, rng), p = rand_vec(5, rng);
        double base = adv_triplet_loss(a, n, p, 1.0);
        double rot = adv_triplet_loss(rotate(q, a), rotate(q, n), rotate(q, p), 1.0);
        REQUIRE_THAT(rot, Catch::Matchers::WithinAbs(base, 1e-9));
    }
}

TEST_CASE("adv triplet graph matches scalar form and finite differences") {
    Rng rng(103);
    for (int trial = 0; trial < 10; ++trial) {
        auto a = rand_vec(4, rng), n = rand_vec(4, rng), p = rand_vec(4, rng);
        double scalar = adv_triplet_loss(a, n, p, 1.0);
        Var va = make_input(row_tensor(a), true);
        Var vn = constant(row_tensor(n));
        Var vp = constant(row_tensor(p));
        Var loss = adv_triplet_loss_rows(va, vn, vp, 1.0);
        REQUIRE_THAT(loss->value.data[0], Catch::Matchers::WithinAbs(scalar, 1e-12));
        if (scalar < 1e-3) continue;  // keep away from the hinge kink for FD
        backward(loss);
        const double h = 1e-5;
        for (int j = 0; j < 4; ++j) {
            auto ap = a, am = a;
            ap[static_cast<std::size_t>(j)] += h;
            am[static_cast<std::size_t>(j)] -= h;
            double fd = (adv_triplet_loss(ap, n, p, 1.0) - adv_triplet_loss(am, n, p, 1.0)) / (2 * h);
            double ad = va->grad.data[static_cast<std::size_t>(j)];
            REQUIRE_THAT(ad, Catch::Matchers::WithinRel(fd, 1e-4) || Catch::Matchers::WithinAbs(fd, 1e-7));
        }
    }
}

TEST_CASE("adv triplet graph means over mined triplets") {
    Tensor emb({3, 2});
    emb.at2(0, 0) = 0; emb.at2(0, 1) = 0;
    emb.at2(1, 0) = 3; emb.at2(1, 1) = 4;
    emb.at2(2, 0) = 0; emb.at2(2, 1) = 0;
    std::vector<TripletIndices> trips{{0, 1, 2, TripletIndices::Policy::supervised_batch_hard},
                                      {2, 1, 0, TripletIndices::Policy::supervised_batch_hard}};
    Var loss = adv_triplet_loss_graph(constant(emb), trips, 1.0);
    REQUIRE_THAT(loss->value.data[0], Catch::Matchers::WithinAbs(6.0, 1e-12));  // both rows are the 6.0 example
    REQUIRE_THROWS_AS(adv_triplet_loss_graph(constant(emb), {}, 1.0), FatalError);
}

TEST_CASE("discriminator loss worked examples") {
    REQUIRE_THAT(discriminator_loss({0.0}, {}), Catch::Matchers::WithinAbs(0.69314718055994531, 1e-10));
    // saturated correct classification drives the loss to zero
    REQUIRE_THAT(discriminator_loss({40.0}, {-40.0}), Catch::Matchers::WithinAbs(0.0, 1e-12));
    REQUIRE_THROWS_AS(discriminator_loss({}, {}), FatalError);
    REQUIRE_THROWS_AS(discriminator_loss({0.0}, {0.0}, {1}), FatalError);
}

TEST_CASE("flipping every label equals swapping real and fake") {
    Rng rng(104);
    for (int trial = 0; trial < 50; ++trial) {
        auto rl = rand_vec(6, rng, -3, 3), fl = rand_vec(6, rng, -3, 3);
        std::vector<std::uint8_t> all_flip(12, 1);
        double flipped = discriminator_loss(rl, fl, all_flip);
        double swapped = discriminator_loss(fl, rl);
        REQUIRE_THAT(flipped, Catch::Matchers::WithinRel(swapped, 1e-12));
    }
}

TEST_CASE("discriminator graph matches scalar and backpropagates") {
    Rng rng(105);
    auto rl = rand_vec(5, rng, -2, 2), fl = rand_vec(5, rng, -2, 2);
    std::vector<std::uint8_t> flips{1, 0, 0, 1, 0, 0, 0, 1, 0, 0};
    double scalar = discriminator_loss(rl, fl, flips);
    Var vr = make_input(Tensor::from_vector(rl), true);
    Var vf = make_input(Tensor::from_vector(fl), true);
    Var loss = discriminator_loss_graph(vr, vf, flips);
    REQUIRE_THAT(loss->value.data[0], Catch::Matchers::WithinRel(scalar, 1e-12));

    backward(loss);
    const double h = 1e-6;
    for (int j = 0; j < 5; ++j) {
        auto rp = rl, rm = rl;
        rp[static_cast<std::size_t>(j)] += h;
        rm[static_cast<std::size_t>(j)] -= h;
        double fd = (discriminator_loss(rp, fl, flips) - discriminator_loss(rm, fl, flips)) / (2 * h);
        REQUIRE_THAT(vr->grad.data[static_cast<std::size_t>(j)],
                     Catch::Matchers::WithinRel(fd, 1e-4) || Catch::Matchers::WithinAbs(fd, 1e-8));
    }
}

TEST_CASE("generator gan loss examples and stability") {
    REQUIRE_THAT(generator_gan_loss({0.0}), Catch::Matchers::WithinAbs(-0.69314718055994531, 1e-10));
    double v = generator_gan_loss({-20.0});
    REQUIRE_THAT(v, Catch::Matchers::WithinRel(-2.0611536181902037e-9, 1e-6));
    REQUIRE(std::isfinite(generator_gan_loss({800.0})));
    REQUIRE(std::isfinite(generator_gan_loss({-800.0})));
    REQUIRE_THROWS_AS(generator_gan_loss({}), FatalError);
}

TEST_CASE("generator gan loss gradient matches finite differences") {
    Rng rng(106);
    auto z = rand_vec(6, rng, -3, 3);
    Var vz = make_input(Tensor::from_vector(z), true);
    backward(generator_gan_loss_graph(vz));
    const double h = 1e-6;
    for (int j = 0; j < 6; ++j) {
        auto zp = z, zm = z;
        zp[static_cast<std::size_t>(j)] += h;
        zm[static_cast<std::size_t>(j)] -= h;
        double fd = (generator_gan_loss(zp) - generator_gan_loss(zm)) / (2 * h);
        REQUIRE_THAT(vz->grad.data[static_cast<std::size_t>(j)], Catch::Matchers::WithinRel(fd, 1e-4));
    }
}

TEST_CASE("nonsaturating generator loss has the opposite saturation pattern") {
    // saturating: gradient vanishes for very negative logits; nonsaturating does not
    Var vz = make_input(Tensor::from_vector({-20.0}), true);
    backward(generator_gan_loss_graph(vz));
    REQUIRE(std::abs(vz->grad.data[0]) < 1e-6);
    Var vz2 = make_input(Tensor::from_vector({-20.0}), true);
    backward(generator_gan_loss_nonsaturating_graph(vz2));
    REQUIRE(std::abs(vz2->grad.data[0]) > 0.9);
}

TEST_CASE("combined objective bookkeeping") {
    LossValue lv = combined_generator_objective(-0.5, 6.0, 0.01);
    REQUIRE_THAT(lv.value, Catch::Matchers::WithinAbs(-0.44, 1e-12));
    REQUIRE(lv.components.at("gan") == -0.5);
    REQUIRE(lv.components.at("trip") == 6.0);
    REQUIRE(lv.components.at("lambda") == 0.01);

    LossValue zero = combined_generator_objective(-0.7, 123.0, 0.0);
    REQUIRE(zero.value == -0.7);

    Rng rng(107);
    for (int i = 0; i < 100; ++i) {
        double g = rng.uniform(-5, 5), t = rng.uniform(0, 10), l = rng.uniform(0, 1);
        LossValue v = combined_generator_objective(g, t, l);
        double reassembled = v.components.at("gan") + v.components.at("lambda") * v.components.at("trip");
        REQUIRE_THAT(v.value, Catch::Matchers::WithinRel(reassembled, 1e-6) || Catch::Matchers::WithinAbs(reassembled, 1e-12));
    }
    REQUIRE_THROWS_AS(combined_generator_objective(0, 0, -0.1), FatalError);
}
