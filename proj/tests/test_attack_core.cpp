#include <catch_amalgamated.hpp>

#include "mega/attack_core.hpp"

using namespace mega;

TEST_CASE("budget converts the 0-255 scale exactly") {
    for (double e : {1.0, 8.0, 16.0, 32.0, 255.0}) {
        AttackBudget b(e);
        REQUIRE(b.eps_255 == e);
        REQUIRE(b.epsilon == e / 255.0);
    }
    REQUIRE_THROWS_AS(AttackBudget(0.0), FatalError);
    REQUIRE_THROWS_AS(AttackBudget(-1.0), FatalError);
    REQUIRE_THROWS_AS(AttackBudget(256.0), FatalError);
}

TEST_CASE("projection clamps a raw pixel to the ball edge") {
    Tensor x = Tensor::scalar(0.5);
    Tensor raw = Tensor::scalar(0.9);
    double eps = 16.0 / 255.0;
    Tensor out = project_linf(raw, x, eps);
    REQUIRE(out.data[0] == 0.5 + eps);
    REQUIRE_THAT(out.data[0], Catch::Matchers::WithinAbs(0.56275, 1e-4));

    // raw already inside the ball passes through unchanged
    Tensor same = project_linf(x, x, eps);
    REQUIRE(same.data[0] == 0.5);

    // range intersection: near 0 and near 1 the valid range wins
    Tensor lo_x = Tensor::scalar(0.01), big = Tensor::scalar(-3.0);
    REQUIRE(project_linf(big, lo_x, eps).data[0] == 0.0);
    Tensor hi_x = Tensor::scalar(0.99), huge = Tensor::scalar(7.0);
    REQUIRE(project_linf(huge, hi_x, eps).data[0] == 1.0);
}

TEST_CASE("projection properties over a random sweep") {
    Rng rng(41);
    const int trials = 10000;
    for (double e255 : {1.0, 8.0, 16.0, 32.0}) {
        double eps = AttackBudget(e255).epsilon;
        for (int t = 0; t < trials / 4; ++t) {
            double xv = rng.uniform();
            double raw = rng.uniform(-1.0, 2.0);
            Tensor x = Tensor::scalar(xv);
            Tensor out = project_linf(Tensor::scalar(raw), x, eps);
            double lo = std::max(xv - eps, 0.0), hi = std::min(xv + eps, 1.0);
            REQUIRE(out.data[0] >= lo);
            REQUIRE(out.data[0] <= hi);
            // idempotent bit-exactly
            REQUIRE(project_linf(out, x, eps).data[0] == out.data[0]);
            // never moves a point that was already feasible
            if (raw >= lo && raw <= hi) REQUIRE(out.data[0] == raw);
            assert_within_budget(out, x, eps, "sweep");
        }
    }
}

TEST_CASE("projection is monotone in the raw input") {
    Rng rng(43);
    double eps = 16.0 / 255.0;
    for (int t = 0; t < 2000; ++t) {
        double xv = rng.uniform();
        double r1 = rng.uniform(-1.0, 2.0), r2 = rng.uniform(-1.0, 2.0);
        if (r1 > r2) std::swap(r1, r2);
        Tensor x = Tensor::scalar(xv);
        double o1 = project_linf(Tensor::scalar(r1), x, eps).data[0];
        double o2 = project_linf(Tensor::scalar(r2), x, eps).data[0];
        REQUIRE(o1 <= o2);
    }
}

TEST_CASE("budget assertion rejects out-of-ball values") {
    Tensor x = Tensor::scalar(0.5);
    double eps = 8.0 / 255.0;
    Tensor bad = Tensor::scalar(0.5 + eps + 1e-9);
    REQUIRE_THROWS_AS(assert_within_budget(bad, x, eps, "unit test"), FatalError);
    Tensor good = Tensor::scalar(0.5 + eps);
    REQUIRE_NOTHROW(assert_within_budget(good, x, eps, "unit test"));
}

TEST_CASE("graph projection matches the plain one and passes gradients through") {
    Rng rng(47);
    Tensor x({2, 3});
    Tensor raw({2, 3});
    for (double& v : x.data) v = rng.uniform();
    for (double& v : raw.data) v = rng.uniform(-0.5, 1.5);
    double eps = 16.0 / 255.0;
    Var rv = make_input(raw, true);
    Var out = project_linf_graph(rv, x, eps);
    Tensor plain = project_linf(raw, x, eps);
    REQUIRE(out->value.data == plain.data);
    backward(sum_all(out));
    for (double gv : rv->grad.data) REQUIRE(gv == 1.0);
}

TEST_CASE("perturbation extraction and reuse") {
    Tensor x = Tensor::scalar(0.5);
    Tensor adv = Tensor::scalar(0.5 + 16.0 / 255.0);
    Tensor d = extract_perturbation(x, adv);
    REQUIRE_THAT(d.data[0], Catch::Matchers::WithinAbs(-16.0 / 255.0, 1e-15));

    Tensor zero_d = extract_perturbation(x, x);
    REQUIRE(zero_d.data[0] == 0.0);

    // applying delta from one image to another stays inside the shifted ball
    Tensor other = Tensor::scalar(0.3);
    double reapplied = other.data[0] - d.data[0];
    REQUIRE(std::abs(reapplied - other.data[0]) <= 16.0 / 255.0 + 1e-15);

    Tensor bad({2});
    REQUIRE_THROWS_AS(extract_perturbation(x, bad), FatalError);
}

TEST_CASE("attack with an untrained generator respects the budget") {
    Rng rng(53);
    Generator g(8, rng);
    Tensor batch({2, 3, 16, 16});
    for (double& v : batch.data) v = rng.uniform();
    AttackBudget budget(16.0);
    Tensor adv = attack(g, batch, budget);
    REQUIRE(adv.shape == batch.shape);
    double worst = 0.0;
    for (std::size_t i = 0; i < adv.data.size(); ++i) {
        worst = std::max(worst, std::abs(adv.data[i] - batch.data[i]));
        REQUIRE(adv.data[i] >= 0.0);
        REQUIRE(adv.data[i] <= 1.0);
    }
    REQUIRE(worst <= budget.epsilon);

    // deterministic for fixed inputs
    Tensor adv2 = attack(g, batch, budget);
    REQUIRE(adv.data == adv2.data);
}

TEST_CASE("vanishing budget returns the input") {
    Rng rng(59);
    Generator g(8, rng);
    Tensor batch({1, 3, 16, 16});
    for (double& v : batch.data) v = 0.2 + 0.6 * rng.uniform();
    AttackBudget tiny(2.55e-7);  // eps = 1e-9 in pixel units
    Tensor adv = attack(g, batch, tiny);
    // one rounding of x +/- eps at the ball edge adds at most an ulp of x
    for (std::size_t i = 0; i < adv.data.size(); ++i)
        REQUIRE(std::abs(adv.data[i] - batch.data[i]) <= 1e-9 + 1e-15);
}

TEST_CASE("masked attack needs a surrogate and changes the generator input") {
    Rng rng(61);
    Generator g(8, rng);
    Tensor batch({3, 3, 16, 16});
    for (double& v : batch.data) v = rng.uniform();
    AttackBudget budget(16.0);
    REQUIRE_THROWS_AS(attack(g, batch, budget, true, nullptr), FatalError);

    auto emb = std::make_shared<ToyEmbedder>(build_toy_embedder("A", 16, 7));
    EmbedderHandle f = make_handle(emb);
    Tensor masked = attack(g, batch, budget, true, &f);
    assert_within_budget(masked, batch, budget.epsilon, "masked attack");
    Tensor plain = attack(g, batch, budget);
    REQUIRE(masked.data != plain.data);

    // masking pulls negatives from the batch, so one image alone is an error
    Tensor solo({1, 3, 16, 16});
    for (double& v : solo.data) v = rng.uniform();
    REQUIRE_THROWS_AS(attack(g, solo, budget, true, &f), FatalError);
}
