// Copyright 2026 The Duet Authors
// SPDX-License-Identifier: Apache-2.0
//
// Contrastive loss suite: bidirectional InfoNCE over in-batch negatives, the
// hard-negative variant for triplet batches, and the per-stage joint losses.
//
// Every loss is computed in log space. The per-row term is evaluated as
// lse(z - z_diag) rather than lse(z) - z_diag, which avoids catastrophic
// cancellation when the diagonal dominates (tau = 0.05 puts logits near 20)
// and makes the k = 1 loss exactly zero.

#pragma once

#include <cmath>
#include <stdexcept>
#include <variant>

#include "duet/tensor.hpp"

namespace duet {

inline constexpr double kTextTemperature = 0.05;
inline constexpr double kTrainableInvTempInit = 1.0 / 0.07;
inline constexpr double kMaxInverseTemperature = 100.0;

// Softmax temperature. Fixed mode holds a constant tau; trainable mode holds
// a learnable scalar s with 1/tau = exp(s), clamped so 1/tau <= 100.
class Temperature {
public:
    static Temperature fixed(double tau) {
        if (!(tau > 0.0)) {
            throw std::invalid_argument("Temperature: tau must be positive");
        }
        Temperature t;
        t.trainable_ = false;
        t.fixed_inv_tau_ = 1.0 / tau;
        return t;
    }

    static Temperature trainable(double inv_tau_init = kTrainableInvTempInit) {
        if (!(inv_tau_init > 0.0)) {
            throw std::invalid_argument("Temperature: initial 1/tau must be positive");
        }
        Temperature t;
        t.trainable_ = true;
        t.log_inv_tau_ = Tensor::scalar(std::log(inv_tau_init), /*requires_grad=*/true);
        return t;
    }

    bool is_trainable() const { return trainable_; }

    double tau() const {
        return trainable_ ? std::exp(-log_inv_tau_.value()) : 1.0 / fixed_inv_tau_;
    }

    // The learnable scalar (trainable mode only); exposed for the optimizer
    // and checkpointing.
    Tensor& log_inv_tau() {
        require_trainable();
        return log_inv_tau_;
    }
    const Tensor& log_inv_tau() const {
        require_trainable();
        return log_inv_tau_;
    }

    // Clamp so 1/tau never exceeds the cap; called after each optimizer step.
    void clamp() {
        if (trainable_) {
            double cap = std::log(kMaxInverseTemperature);
            double& v = log_inv_tau_.mutable_data()[0];
            v = std::min(v, cap);
        }
    }

    // Scales similarity scores by 1/tau, differentiably in trainable mode.
    Tensor apply(const Tensor& scores) const {
        if (trainable_) {
            return mul_scalar_tensor(scores, duet::exp(log_inv_tau_));
        }
        return scale(scores, fixed_inv_tau_);
    }

private:
    void require_trainable() const {
        if (!trainable_) {
            throw std::runtime_error("Temperature: fixed temperature has no learnable state");
        }
    }

    bool trainable_ = false;
    double fixed_inv_tau_ = 1.0;
    Tensor log_inv_tau_;
};

// Query/positive embedding batches for the pairwise losses.
struct PairEmbeddings {
    Tensor queries;    // k x d
    Tensor positives;  // k x d
};

inline constexpr std::size_t kTripletNegatives = 7;

// Triplet batch: each row pairs a query and positive with exactly 7 negatives.
struct TripletEmbeddings {
    Tensor queries;    // k x d
    Tensor positives;  // k x d
    Tensor negatives;  // k x 7 x d

    void validate() const {
        if (queries.rank() != 2 || positives.rank() != 2 || negatives.rank() != 3) {
            throw std::invalid_argument("TripletEmbeddings: bad ranks");
        }
        std::size_t k = queries.rows();
        std::size_t d = queries.cols();
        if (positives.rows() != k || positives.cols() != d) {
            throw std::invalid_argument("TripletEmbeddings: positives shape mismatch");
        }
        if (negatives.shape()[0] != k || negatives.shape()[2] != d) {
            throw std::invalid_argument("TripletEmbeddings: negatives shape mismatch");
        }
        if (negatives.shape()[1] != kTripletNegatives) {
            throw std::invalid_argument("TripletEmbeddings: expected 7 negatives per row");
        }
    }
};

// S[i][j] = cos(a_i, b_j). a is [k_a x d], b is [k_b x d].
inline Tensor cosine_matrix(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.cols()) {
        throw std::invalid_argument("cosine_matrix: embedding dims differ");
    }
    return matmul(l2_normalize_rows(a), transpose(l2_normalize_rows(b)));
}

namespace detail {

// mean over rows i of lse_j(z_ij - z_ii) for a [k x n] score matrix (n >= k),
// where column i is row i's positive.
inline Tensor softmax_loss_rows(const Tensor& scaled_scores) {
    Tensor shifted = broadcast_sub_colvec(scaled_scores, take_diag(scaled_scores));
    return mean_all(log_sum_exp_rows(shifted));
}

}  // namespace detail

// One direction of InfoNCE over a square similarity matrix: mean over rows of
// -ln softmax(S[i] / tau)[i].
inline Tensor nce_directional(const Tensor& scores, const Temperature& temperature) {
    if (scores.rank() != 2 || scores.rows() != scores.cols()) {
        throw std::invalid_argument("nce_directional: similarity matrix must be square");
    }
    return detail::softmax_loss_rows(temperature.apply(scores));
}

// Bidirectional InfoNCE of Eq-style in-batch contrastive training: the
// directional loss of S plus the directional loss of S^T.
inline Tensor nce_bidirectional(const Tensor& queries, const Tensor& positives,
                                const Temperature& temperature) {
    if (queries.rank() != 2 || positives.rank() != 2 || queries.rows() != positives.rows() ||
        queries.cols() != positives.cols()) {
        throw std::invalid_argument("nce_bidirectional: batch shapes must match");
    }
    Tensor s = cosine_matrix(queries, positives);
    return add(nce_directional(s, temperature),
               nce_directional(transpose(s), temperature));
}

// Hard-negative InfoNCE. The forward (query -> passage) term extends the
// candidate set with every row's 7 negatives; the backward (passage -> query)
// term stays a plain directional loss, which carries no extra negatives.
inline Tensor nce_hard_negatives(const TripletEmbeddings& batch, const Temperature& temperature) {
    batch.validate();
    std::size_t k = batch.queries.rows();
    std::size_t d = batch.queries.cols();

    Tensor negatives_flat = reshape(batch.negatives, {k * kTripletNegatives, d});
    Tensor candidates = concat_rows({batch.positives, negatives_flat});
    Tensor forward_scores = cosine_matrix(batch.queries, candidates);  // k x 8k
    Tensor forward_loss = detail::softmax_loss_rows(temperature.apply(forward_scores));

    Tensor backward_scores = cosine_matrix(batch.positives, batch.queries);
    Tensor backward_loss = nce_directional(backward_scores, temperature);

    return add(forward_loss, backward_loss);
}

// Text-side input of a stage loss: pair batches for stages 1-2, triplet
// batches for stage 3.
using TextBatchInput = std::variant<PairEmbeddings, TripletEmbeddings>;

// Per-stage joint loss:
//   stage 1, 2: bidirectional InfoNCE on text pairs + on caption/image pairs
//   stage 3:    hard-negative InfoNCE on text triplets + bidirectional
//               InfoNCE on caption/image pairs
inline Tensor stage_joint_loss(int stage, const TextBatchInput& text,
                               const PairEmbeddings& image, const Temperature& tau_text,
                               const Temperature& tau_img) {
    if (stage < 1 || stage > 3) {
        throw std::invalid_argument("stage_joint_loss: stage must be 1, 2, or 3");
    }
    Tensor image_loss = nce_bidirectional(image.queries, image.positives, tau_img);
    if (stage == 3) {
        const auto* triplets = std::get_if<TripletEmbeddings>(&text);
        if (triplets == nullptr) {
            throw std::invalid_argument("stage_joint_loss: stage 3 requires a triplet batch");
        }
        return add(nce_hard_negatives(*triplets, tau_text), image_loss);
    }
    const auto* pairs = std::get_if<PairEmbeddings>(&text);
    if (pairs == nullptr) {
        throw std::invalid_argument("stage_joint_loss: stages 1-2 require a pair batch");
    }
    return add(nce_bidirectional(pairs->queries, pairs->positives, tau_text), image_loss);
}

}  // namespace duet
