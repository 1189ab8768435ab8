// Copyright 2026 The Duet Authors
// SPDX-License-Identifier: Apache-2.0
//
// The two encoder towers. Both are single-block transformers projecting into
// a shared d_out space:
//   text:  byte embedding -> ALiBi-biased masked attention -> masked mean
//          pool -> linear projection
//   image: non-overlapping PxP patches -> linear -> attention -> mean pool
//          -> linear projection
// The image tower carries no positional signal beyond patch order.

#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "duet/rng.hpp"
#include "duet/tensor.hpp"
#include "duet/tokenizer.hpp"

namespace duet {

inline constexpr double kParamInitStddev = 0.02;

struct TextEncoderParams {
    Tensor token_embedding;  // vocab x d_m
    Tensor attn_qkv;         // d_m x 3*d_m
    Tensor attn_out;         // d_m x d_m
    Tensor proj;             // d_m x d_out
    int heads = 0;

    std::size_t model_dim() const { return attn_out.rows(); }
    std::size_t out_dim() const { return proj.cols(); }
};

struct ImageEncoderParams {
    Tensor patch_proj;  // (P*P*C) x d_m
    Tensor attn_qkv;    // d_m x 3*d_m
    Tensor attn_out;    // d_m x d_m
    Tensor proj;        // d_m x d_out
    int heads = 0;
    int patch_size = 0;
    int channels = 0;

    std::size_t model_dim() const { return attn_out.rows(); }
    std::size_t out_dim() const { return proj.cols(); }
};

namespace detail {

inline void check_attention_dims(std::size_t d_m, int heads, const char* what) {
    if (heads <= 0) {
        throw std::invalid_argument(std::string(what) + ": heads must be positive");
    }
    if (d_m % static_cast<std::size_t>(heads) != 0) {
        throw std::invalid_argument(std::string(what) + ": heads must divide model dim");
    }
}

}  // namespace detail

inline TextEncoderParams init_text_encoder(Rng& rng, std::size_t d_m, std::size_t d_out,
                                           int heads, double stddev = kParamInitStddev) {
    detail::check_attention_dims(d_m, heads, "init_text_encoder");
    TextEncoderParams p;
    p.token_embedding = randn_init(rng, {static_cast<std::size_t>(kVocabSize), d_m}, stddev, true);
    p.attn_qkv = randn_init(rng, {d_m, 3 * d_m}, stddev, true);
    p.attn_out = randn_init(rng, {d_m, d_m}, stddev, true);
    p.proj = randn_init(rng, {d_m, d_out}, stddev, true);
    p.heads = heads;
    return p;
}

inline ImageEncoderParams init_image_encoder(Rng& rng, std::size_t d_m, std::size_t d_out,
                                             int heads, int patch_size, int channels,
                                             double stddev = kParamInitStddev) {
    detail::check_attention_dims(d_m, heads, "init_image_encoder");
    if (patch_size <= 0 || channels <= 0) {
        throw std::invalid_argument("init_image_encoder: patch size and channels must be positive");
    }
    ImageEncoderParams p;
    std::size_t patch_dim =
        static_cast<std::size_t>(patch_size) * patch_size * channels;
    p.patch_proj = randn_init(rng, {patch_dim, d_m}, stddev, true);
    p.attn_qkv = randn_init(rng, {d_m, 3 * d_m}, stddev, true);
    p.attn_out = randn_init(rng, {d_m, d_m}, stddev, true);
    p.proj = randn_init(rng, {d_m, d_out}, stddev, true);
    p.heads = heads;
    p.patch_size = patch_size;
    p.channels = channels;
    return p;
}

// ALiBi slope schedule: slope for head i (1-based) is 2^(-8*i/heads).
inline std::vector<double> alibi_slopes(int heads) {
    if (heads <= 0) {
        throw std::invalid_argument("alibi_slopes: heads must be positive");
    }
    std::vector<double> slopes(heads);
    for (int i = 1; i <= heads; ++i) {
        slopes[i - 1] = std::exp2(-8.0 * static_cast<double>(i) / heads);
    }
    return slopes;
}

// Constant attention bias for one head over one sequence: -slope * |i - j|
// when alibi is on, plus kMaskedLogit on PAD key columns.
inline Tensor attention_bias_matrix(std::size_t length, double slope, bool alibi,
                                    const std::uint8_t* key_mask) {
    std::vector<double> bias(length * length, 0.0);
    for (std::size_t i = 0; i < length; ++i) {
        for (std::size_t j = 0; j < length; ++j) {
            double b = 0.0;
            if (alibi) {
                double dist = static_cast<double>(i > j ? i - j : j - i);
                b -= slope * dist;
            }
            if (key_mask != nullptr && key_mask[j] == 0) {
                b = kMaskedLogit;
            }
            bias[i * length + j] = b;
        }
    }
    return Tensor::from_data({length, length}, std::move(bias));
}

// Single-block multi-head attention with residual connection over one
// sequence [L x d_m]. key_mask may be null (all positions real).
inline Tensor attention_block(const Tensor& x, const Tensor& w_qkv, const Tensor& w_out,
                              int heads, bool alibi, const std::uint8_t* key_mask) {
    std::size_t length = x.rows();
    std::size_t d_m = x.cols();
    detail::check_attention_dims(d_m, heads, "attention_block");
    if (w_qkv.rows() != d_m || w_qkv.cols() != 3 * d_m) {
        throw std::invalid_argument("attention_block: qkv weight shape mismatch");
    }
    if (key_mask != nullptr) {
        bool any = false;
        for (std::size_t j = 0; j < length; ++j) {
            any = any || key_mask[j] != 0;
        }
        if (!any) {
            throw std::invalid_argument("attention_block: mask excludes every position");
        }
    }

    std::size_t head_dim = d_m / heads;
    double logit_scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
    std::vector<double> slopes = alibi_slopes(heads);

    Tensor qkv = matmul(x, w_qkv);
    std::vector<Tensor> head_outputs;
    head_outputs.reserve(heads);
    for (int h = 0; h < heads; ++h) {
        std::size_t off = static_cast<std::size_t>(h) * head_dim;
        Tensor q = slice_cols(qkv, off, off + head_dim);
        Tensor k = slice_cols(qkv, d_m + off, d_m + off + head_dim);
        Tensor v = slice_cols(qkv, 2 * d_m + off, 2 * d_m + off + head_dim);
        Tensor logits = matmul(q, transpose(k));
        Tensor bias = attention_bias_matrix(length, slopes[h], alibi, key_mask);
        Tensor attn = masked_scaled_softmax_rows(logits, logit_scale, bias);
        head_outputs.push_back(matmul(attn, v));
    }
    Tensor merged = heads == 1 ? head_outputs[0] : concat_cols(head_outputs);
    return add(matmul(merged, w_out), x);
}

// Batched attention over a rank-3 [B x L x d_m] input. mask, when present,
// has B*L entries matching the token layout.
inline Tensor attention_forward(const Tensor& x, const Tensor& w_qkv, const Tensor& w_out,
                                int heads, bool alibi,
                                const std::vector<std::uint8_t>* mask = nullptr) {
    if (x.rank() != 3) {
        throw std::invalid_argument("attention_forward: expected a [B x L x d] tensor");
    }
    std::size_t batch = x.shape()[0];
    std::size_t length = x.shape()[1];
    std::size_t d_m = x.shape()[2];
    if (mask != nullptr && mask->size() != batch * length) {
        throw std::invalid_argument("attention_forward: mask size mismatch");
    }
    Tensor flat = reshape(x, {batch * length, d_m});
    std::vector<Tensor> outputs;
    outputs.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        Tensor item = slice_rows(flat, b * length, (b + 1) * length);
        const std::uint8_t* key_mask = mask != nullptr ? mask->data() + b * length : nullptr;
        outputs.push_back(attention_block(item, w_qkv, w_out, heads, alibi, key_mask));
    }
    Tensor stacked = batch == 1 ? outputs[0] : concat_rows(outputs);
    return reshape(stacked, {batch, length, d_m});
}

// Encodes a token batch into raw (un-normalized) [B x d_out] embeddings.
inline Tensor encode_text(const TokenBatch& tokens, const TextEncoderParams& params) {
    if (tokens.batch == 0 || tokens.length == 0) {
        throw std::invalid_argument("encode_text: empty token batch");
    }
    std::size_t d_m = params.model_dim();
    std::vector<std::size_t> flat_ids(tokens.ids.begin(), tokens.ids.end());
    Tensor embedded = gather_rows(params.token_embedding, flat_ids);

    std::vector<Tensor> pooled;
    pooled.reserve(tokens.batch);
    for (std::size_t b = 0; b < tokens.batch; ++b) {
        std::size_t real = tokens.real_count(b);
        if (real == 0) {
            throw std::invalid_argument("encode_text: row with zero real tokens");
        }
        Tensor item = slice_rows(embedded, b * tokens.length, (b + 1) * tokens.length);
        Tensor block = attention_block(item, params.attn_qkv, params.attn_out, params.heads,
                                       /*alibi=*/true, tokens.mask.data() + b * tokens.length);
        // Masked mean pool as a constant-weight matmul.
        std::vector<double> weights(tokens.length, 0.0);
        double inv = 1.0 / static_cast<double>(real);
        for (std::size_t t = 0; t < tokens.length; ++t) {
            if (tokens.real_at(b, t)) {
                weights[t] = inv;
            }
        }
        Tensor pool_row = Tensor::from_data({1, tokens.length}, std::move(weights));
        pooled.push_back(matmul(pool_row, block));
    }
    Tensor stacked = tokens.batch == 1 ? pooled[0] : concat_rows(pooled);
    return matmul(stacked, params.proj);
}

namespace detail {

// Patch extraction indices for one [C x H x W] image laid out row-major.
// Patch order is row-major over the patch grid; within a patch the layout is
// (channel, y, x).
inline std::vector<std::size_t> patch_gather_indices(std::size_t channels, std::size_t height,
                                                     std::size_t width, std::size_t patch) {
    std::size_t grid_h = height / patch;
    std::size_t grid_w = width / patch;
    std::vector<std::size_t> idx;
    idx.reserve(grid_h * grid_w * channels * patch * patch);
    for (std::size_t py = 0; py < grid_h; ++py) {
        for (std::size_t px = 0; px < grid_w; ++px) {
            for (std::size_t c = 0; c < channels; ++c) {
                for (std::size_t y = 0; y < patch; ++y) {
                    for (std::size_t x = 0; x < patch; ++x) {
                        idx.push_back((c * height + py * patch + y) * width + px * patch + x);
                    }
                }
            }
        }
    }
    return idx;
}

}  // namespace detail

// Encodes a [B x C x H x W] image batch into raw [B x d_out] embeddings.
// Pixel values must lie in [0, 1]; H and W must be divisible by the patch
// size.
inline Tensor encode_image(const Tensor& images, const ImageEncoderParams& params) {
    if (images.rank() != 4) {
        throw std::invalid_argument("encode_image: expected a [B x C x H x W] tensor");
    }
    std::size_t batch = images.shape()[0];
    std::size_t channels = images.shape()[1];
    std::size_t height = images.shape()[2];
    std::size_t width = images.shape()[3];
    std::size_t patch = static_cast<std::size_t>(params.patch_size);
    if (channels != static_cast<std::size_t>(params.channels)) {
        throw std::invalid_argument("encode_image: channel count mismatch");
    }
    if (height % patch != 0 || width % patch != 0) {
        throw std::invalid_argument("encode_image: image size not divisible by patch size");
    }
    for (double v : images.data()) {
        if (v < 0.0 || v > 1.0) {
            throw std::invalid_argument("encode_image: pixel values must lie in [0, 1]");
        }
    }

    std::size_t n_patches = (height / patch) * (width / patch);
    std::size_t patch_dim = channels * patch * patch;
    std::size_t image_elems = channels * height * width;
    std::vector<std::size_t> base = detail::patch_gather_indices(channels, height, width, patch);

    // Uniform mean pool over patches.
    Tensor pool_row = Tensor::filled({1, n_patches}, 1.0 / static_cast<double>(n_patches));

    std::vector<Tensor> pooled;
    pooled.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        std::vector<std::size_t> idx(base.size());
        for (std::size_t i = 0; i < base.size(); ++i) {
            idx[i] = b * image_elems + base[i];
        }
        Tensor patches = gather_flat(images, idx, {n_patches, patch_dim});
        Tensor tokens = matmul(patches, params.patch_proj);
        Tensor block = attention_block(tokens, params.attn_qkv, params.attn_out, params.heads,
                                       /*alibi=*/false, nullptr);
        pooled.push_back(matmul(pool_row, block));
    }
    Tensor stacked = batch == 1 ? pooled[0] : concat_rows(pooled);
    return matmul(stacked, params.proj);
}

// Named views over all trainable encoder tensors; ordering is fixed by the
// map so optimizer walks and checkpoints are deterministic.
inline std::map<std::string, Tensor> named_parameters(const TextEncoderParams& text,
                                                      const ImageEncoderParams& image) {
    return {
        {"text.token_embedding", text.token_embedding},
        {"text.attn_qkv", text.attn_qkv},
        {"text.attn_out", text.attn_out},
        {"text.proj", text.proj},
        {"image.patch_proj", image.patch_proj},
        {"image.attn_qkv", image.attn_qkv},
        {"image.attn_out", image.attn_out},
        {"image.proj", image.proj},
    };
}

}  // namespace duet
