// Copyright 2026 The Duet Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "duet/grad_check.hpp"
#include "duet/losses.hpp"

using namespace duet;

namespace {

Tensor random_embeddings(Rng& rng, std::size_t k, std::size_t d) {
    return randn_init(rng, {k, d}, 1.0);
}

TripletEmbeddings random_triplets(Rng& rng, std::size_t k, std::size_t d) {
    TripletEmbeddings t;
    t.queries = random_embeddings(rng, k, d);
    t.positives = random_embeddings(rng, k, d);
    t.negatives = randn_init(rng, {k, kTripletNegatives, d}, 1.0);
    return t;
}

// Forward-term-only counterpart without the 7 negatives, for the
// denominator-monotonicity property.
double forward_term_without_negatives(const TripletEmbeddings& t, const Temperature& tau) {
    Tensor s = cosine_matrix(t.queries, t.positives);
    return nce_directional(s, tau).value();
}

double forward_term_with_negatives(const TripletEmbeddings& t, const Temperature& tau) {
    Tensor backward = nce_directional(cosine_matrix(t.positives, t.queries), tau);
    return nce_hard_negatives(t, tau).value() - backward.value();
}

}  // namespace

TEST_CASE("cosine_matrix on orthonormal and permuted inputs") {
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor s = cosine_matrix(eye, eye);
    REQUIRE(s.data() == std::vector<double>{1, 0, 0, 1});

    Tensor swapped = Tensor::from_data({2, 2}, {0, 1, 1, 0});
    Tensor s2 = cosine_matrix(eye, swapped);
    REQUIRE(s2.data() == std::vector<double>{0, 1, 1, 0});

    Tensor zero = Tensor::from_data({2, 2}, {0, 0, 1, 1});
    REQUIRE_THROWS_AS(cosine_matrix(zero, eye), std::invalid_argument);
}

TEST_CASE("cosine_matrix ignores row scaling") {
    Rng rng(101);
    Tensor a = random_embeddings(rng, 4, 6);
    Tensor b = random_embeddings(rng, 4, 6);
    Tensor s = cosine_matrix(a, b);

    Tensor scaled = a.clone();
    for (std::size_t j = 0; j < 6; ++j) scaled.mutable_data()[2 * 6 + j] *= 5.0;
    Tensor s2 = cosine_matrix(scaled, b);
    for (std::size_t i = 0; i < s.size(); ++i) {
        REQUIRE(std::fabs(s.data()[i] - s2.data()[i]) <= 1e-12);
    }
}

TEST_CASE("nce_directional closed forms") {
    Temperature tau1 = Temperature::fixed(1.0);
    Temperature tau005 = Temperature::fixed(0.05);

    Tensor s1 = Tensor::from_data({1, 1}, {0.37});
    REQUIRE(nce_directional(s1, tau1).value() == 0.0);

    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    double expected = std::log1p(std::exp(-20.0));  // ln(1 + e^-20) ~ 2.0612e-9
    REQUIRE(nce_directional(eye, tau005).value() ==
            Catch::Approx(expected).epsilon(1e-6));

    Tensor zeros = Tensor::from_data({2, 2}, {0, 0, 0, 0});
    REQUIRE(nce_directional(zeros, tau1).value() == Catch::Approx(std::log(2.0)));

    Tensor rect = Tensor::from_data({1, 2}, {0, 0});
    REQUIRE_THROWS_AS(nce_directional(rect, tau1), std::invalid_argument);
}

TEST_CASE("nce_bidirectional closed forms and symmetry") {
    Temperature tau005 = Temperature::fixed(0.05);

    Rng rng(103);
    Tensor q1 = random_embeddings(rng, 1, 5);
    Tensor p1 = random_embeddings(rng, 1, 5);
    REQUIRE(nce_bidirectional(q1, p1, tau005).value() == 0.0);

    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    double expected = 2.0 * std::log1p(std::exp(-20.0));  // ~ 4.1223e-9
    REQUIRE(nce_bidirectional(eye, eye, tau005).value() ==
            Catch::Approx(expected).epsilon(1e-6));

    Tensor q = random_embeddings(rng, 5, 8);
    Tensor p = random_embeddings(rng, 5, 8);
    double qp = nce_bidirectional(q, p, tau005).value();
    double pq = nce_bidirectional(p, q, tau005).value();
    REQUIRE(std::fabs(qp - pq) <= 1e-12);

    Tensor short_p = random_embeddings(rng, 3, 8);
    REQUIRE_THROWS_AS(nce_bidirectional(q, short_p, tau005), std::invalid_argument);
}

TEST_CASE("nce_hard_negatives closed forms") {
    Temperature tau1 = Temperature::fixed(1.0);

    // cos(q, p) = 1, all 7 negatives orthogonal to q.
    TripletEmbeddings ortho;
    ortho.queries = Tensor::from_data({1, 8}, {1, 0, 0, 0, 0, 0, 0, 0});
    ortho.positives = Tensor::from_data({1, 8}, {1, 0, 0, 0, 0, 0, 0, 0});
    std::vector<double> negs(7 * 8, 0.0);
    for (std::size_t j = 0; j < 7; ++j) negs[j * 8 + 1 + (j % 7)] = 1.0;
    ortho.negatives = Tensor::from_data({1, 7, 8}, std::move(negs));
    double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 7.0));  // ~ 1.2741
    REQUIRE(nce_hard_negatives(ortho, tau1).value() ==
            Catch::Approx(expected).epsilon(1e-6));

    // q = p = every negative: eight equal denominator terms.
    TripletEmbeddings same;
    same.queries = Tensor::from_data({1, 4}, {0, 1, 0, 0});
    same.positives = same.queries.clone();
    std::vector<double> eq(7 * 4, 0.0);
    for (std::size_t j = 0; j < 7; ++j) eq[j * 4 + 1] = 1.0;
    same.negatives = Tensor::from_data({1, 7, 4}, std::move(eq));
    REQUIRE(nce_hard_negatives(same, tau1).value() ==
            Catch::Approx(std::log(8.0)).epsilon(1e-6));

    // Wrong negative count is rejected.
    TripletEmbeddings bad = same;
    bad.negatives = Tensor::filled({1, 6, 4}, 0.1);
    REQUIRE_THROWS_AS(nce_hard_negatives(bad, tau1), std::invalid_argument);
}

TEST_CASE("hard-negative forward term dominates its no-negative counterpart") {
    Rng rng(107);
    Temperature tau = Temperature::fixed(0.05);
    for (int trial = 0; trial < 1000; ++trial) {
        std::size_t k = 1 + static_cast<std::size_t>(rng.next_u64() % 5);
        std::size_t d = 4 + static_cast<std::size_t>(rng.next_u64() % 8);
        TripletEmbeddings t = random_triplets(rng, k, d);
        double with = forward_term_with_negatives(t, tau);
        double without = forward_term_without_negatives(t, tau);
        REQUIRE(with >= without - 1e-12);
    }
}

TEST_CASE("raising a negative's similarity never lowers the loss") {
    Rng rng(109);
    Temperature tau = Temperature::fixed(0.5);
    for (int trial = 0; trial < 1000; ++trial) {
        TripletEmbeddings t = random_triplets(rng, 1, 6);
        double base = nce_hard_negatives(t, tau).value();

        std::size_t j = rng.next_u64() % kTripletNegatives;
        TripletEmbeddings moved = t;
        moved.negatives = t.negatives.clone();
        // Pull negative j toward the query, which strictly raises cos(q, n_j).
        for (std::size_t c = 0; c < 6; ++c) {
            double n = moved.negatives.data()[j * 6 + c];
            double q = t.queries.data()[c];
            moved.negatives.mutable_data()[j * 6 + c] = n + 0.5 * q;
        }
        double cos_before =
            cosine_matrix(t.queries, reshape(t.negatives, {7, 6})).at(0, j);
        double cos_after =
            cosine_matrix(moved.queries, reshape(moved.negatives, {7, 6})).at(0, j);
        if (cos_after > cos_before) {
            double bumped = nce_hard_negatives(moved, tau).value();
            REQUIRE(bumped >= base - 1e-12);
        }
    }
}

TEST_CASE("loss values are non-negative and scale invariant") {
    Rng rng(113);
    Temperature tau_fixed = Temperature::fixed(0.05);
    Temperature tau_train = Temperature::trainable();
    for (int trial = 0; trial < 1000; ++trial) {
        std::size_t k = 1 + static_cast<std::size_t>(rng.next_u64() % 6);
        std::size_t d = 3 + static_cast<std::size_t>(rng.next_u64() % 10);
        Tensor q = random_embeddings(rng, k, d);
        Tensor p = random_embeddings(rng, k, d);
        const Temperature& tau = (trial % 2 == 0) ? tau_fixed : tau_train;
        double loss = nce_bidirectional(q, p, tau).value();
        REQUIRE(loss >= 0.0);

        std::size_t row = rng.next_u64() % k;
        double factor = 0.25 + 5.0 * rng.next_double();
        Tensor q2 = q.clone();
        for (std::size_t c = 0; c < d; ++c) q2.mutable_data()[row * d + c] *= factor;
        double rescaled = nce_bidirectional(q2, p, tau).value();
        REQUIRE(std::fabs(rescaled - loss) <= 1e-10);
    }
}

TEST_CASE("nce_bidirectional is invariant to paired row permutations") {
    Rng rng(127);
    Temperature tau = Temperature::fixed(0.05);
    for (int trial = 0; trial < 200; ++trial) {
        std::size_t k = 2 + static_cast<std::size_t>(rng.next_u64() % 6);
        std::size_t d = 4 + static_cast<std::size_t>(rng.next_u64() % 8);
        Tensor q = random_embeddings(rng, k, d);
        Tensor p = random_embeddings(rng, k, d);

        std::vector<std::size_t> perm(k);
        std::iota(perm.begin(), perm.end(), 0);
        for (std::size_t i = k; i > 1; --i) {
            std::swap(perm[i - 1], perm[rng.next_u64() % i]);
        }
        auto permute = [&](const Tensor& t) {
            std::vector<double> out(k * d);
            for (std::size_t i = 0; i < k; ++i) {
                std::copy_n(t.data().data() + perm[i] * d, d, out.data() + i * d);
            }
            return Tensor::from_data({k, d}, std::move(out));
        };
        double base = nce_bidirectional(q, p, tau).value();
        double permuted = nce_bidirectional(permute(q), permute(p), tau).value();
        REQUIRE(std::fabs(base - permuted) <= 1e-12);
    }
}

TEST_CASE("temperature sharpening moves the loss monotonically") {
    Rng rng(131);
    // Diagonal-dominant scores: smaller tau drives the loss toward zero.
    Tensor diag = Tensor::from_data({3, 3}, {0.9, 0.1, 0.2, 0.0, 0.8, 0.1, 0.3, 0.2, 0.95});
    // Off-diagonal argmax: smaller tau makes the loss diverge.
    Tensor off = Tensor::from_data({3, 3}, {0.1, 0.9, 0.2, 0.8, 0.0, 0.1, 0.3, 0.9, 0.2});

    double prev_diag = std::numeric_limits<double>::infinity();
    double prev_off = 0.0;
    for (double tau : {0.5, 0.05, 0.005}) {
        Temperature t = Temperature::fixed(tau);
        double ld = nce_directional(diag, t).value();
        double lo = nce_directional(off, t).value();
        REQUIRE(ld < prev_diag);
        REQUIRE(lo > prev_off);
        prev_diag = ld;
        prev_off = lo;
    }
    REQUIRE(prev_diag <= 1e-10);
}

TEST_CASE("stage_joint_loss combinations") {
    Rng rng(137);
    Temperature tau_text = Temperature::fixed(kTextTemperature);
    Temperature tau_img = Temperature::fixed(0.07);

    PairEmbeddings text1{random_embeddings(rng, 1, 6), random_embeddings(rng, 1, 6)};
    PairEmbeddings img1{random_embeddings(rng, 1, 6), random_embeddings(rng, 1, 6)};
    REQUIRE(stage_joint_loss(1, TextBatchInput{text1}, img1, tau_text, tau_img).value() == 0.0);

    PairEmbeddings text{random_embeddings(rng, 4, 6), random_embeddings(rng, 4, 6)};
    PairEmbeddings img{random_embeddings(rng, 4, 6), random_embeddings(rng, 4, 6)};
    double s1 = stage_joint_loss(1, TextBatchInput{text}, img, tau_text, tau_img).value();
    double s2 = stage_joint_loss(2, TextBatchInput{text}, img, tau_text, tau_img).value();
    REQUIRE(s1 == s2);

    TripletEmbeddings triplets = random_triplets(rng, 4, 6);
    double s3 = stage_joint_loss(3, TextBatchInput{triplets}, img, tau_text, tau_img).value();
    double composed = nce_hard_negatives(triplets, tau_text).value() +
                      nce_bidirectional(img.queries, img.positives, tau_img).value();
    REQUIRE(std::fabs(s3 - composed) <= 1e-12);

    REQUIRE_THROWS_AS(stage_joint_loss(3, TextBatchInput{text}, img, tau_text, tau_img),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(stage_joint_loss(1, TextBatchInput{triplets}, img, tau_text, tau_img),
                      std::invalid_argument);
    REQUIRE_THROWS_AS(stage_joint_loss(4, TextBatchInput{text}, img, tau_text, tau_img),
                      std::invalid_argument);
}

TEST_CASE("loss gradients check out for fixed and trainable temperatures") {
    Rng rng(139);
    for (int trial = 0; trial < 40; ++trial) {
        std::size_t k = 2 + static_cast<std::size_t>(rng.next_u64() % 4);
        std::size_t d = 4 + static_cast<std::size_t>(rng.next_u64() % 6);
        Tensor q = random_embeddings(rng, k, d);
        Tensor p = random_embeddings(rng, k, d);
        double tau_value = (trial % 2 == 0) ? 0.05 : 1.0;
        Temperature tau = Temperature::fixed(tau_value);

        double eq = grad_check(
            [&](const Tensor& t) { return nce_bidirectional(t, p, tau); }, q, 1e-3);
        REQUIRE(eq <= 1e-4);

        TripletEmbeddings trip = random_triplets(rng, k, d);
        double en = grad_check(
            [&](const Tensor& t) {
                TripletEmbeddings tt = trip;
                tt.negatives = t;
                return nce_hard_negatives(tt, tau);
            },
            trip.negatives, 1e-3);
        REQUIRE(en <= 1e-4);

        // Gradient through the trainable temperature scalar.
        double et = grad_check(
            [&](const Tensor& t) {
                Temperature trainable = Temperature::trainable();
                trainable.log_inv_tau() = t;
                return nce_bidirectional(q, p, trainable);
            },
            Temperature::trainable().log_inv_tau(), 1e-3);
        REQUIRE(et <= 1e-4);
    }
}

TEST_CASE("temperature invariants") {
    Temperature fixed = Temperature::fixed(0.05);
    REQUIRE(fixed.tau() == Catch::Approx(0.05));
    REQUIRE_FALSE(fixed.is_trainable());
    REQUIRE_THROWS_AS(fixed.log_inv_tau(), std::runtime_error);
    REQUIRE_THROWS_AS(Temperature::fixed(0.0), std::invalid_argument);

    Temperature train = Temperature::trainable();
    REQUIRE(train.tau() == Catch::Approx(0.07));
    train.log_inv_tau().mutable_data()[0] = std::log(500.0);
    train.clamp();
    REQUIRE(1.0 / train.tau() <= kMaxInverseTemperature + 1e-9);
    REQUIRE(train.tau() > 0.0);
}
