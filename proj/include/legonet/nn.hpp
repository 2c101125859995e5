#ifndef LEGONET_NN_HPP
#define LEGONET_NN_HPP

#include "legonet/rng.hpp"
#include "legonet/tensor.hpp"

#include <optional>

namespace lego {

// ---- parameter bundles ----

struct Conv3dParams {
    Tensor weight;            // [C_out, C_in/groups, k, k, k]
    Tensor bias;              // [C_out], optional (undefined == no bias)
    long stride = 1;
    long padding = 0;
    long groups = 1;
};

struct LinearParams {
    Tensor weight;            // [out, in]
    Tensor bias;              // [out], optional
};

struct LayerNormParams {
    Tensor gamma;             // [C]
    Tensor beta;              // [C]
    double eps = 1e-5;
};

struct SENormParams {
    Tensor reduce_weight;     // [C/r, C]
    Tensor gamma_weight;      // [C, C/r]
    Tensor beta_weight;       // [C, C/r]
    long reduction = 2;
    double eps = 1e-5;
};

struct AttentionParams {
    Tensor qkv_weight;        // [3C, C]
    Tensor proj_weight;       // [C, C]
    Tensor rel_pos_bias;      // [heads, (2w-1)^3]
    long heads = 1;
    long window = 2;
    long shift = 0;
};

// ---- constructors (deterministic given rng) ----

Conv3dParams make_conv3d(long c_in, long c_out, long k, long stride, long padding, long groups,
                         Rng& rng, bool bias = true);
LinearParams make_linear(long in, long out, Rng& rng, bool bias = true);
LayerNormParams make_layer_norm(long c, double eps = 1e-5);
SENormParams make_se_norm(long c, long reduction, Rng& rng, double eps = 1e-5);
AttentionParams make_attention(long c, long heads, long window, long shift, Rng& rng);

// ---- ops ----

Tensor conv3d(const Tensor& x, const Conv3dParams& p);

// stride-2 k=2 transposed convolution; weight [C_in, C_out, 2, 2, 2]
Tensor transposed_conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor linear(const Tensor& x, const LinearParams& p);          // trailing-dim affine
Tensor layer_norm(const Tensor& x, const LayerNormParams& p);   // trailing-dim standardize
Tensor instance_standardize(const Tensor& x, double eps);       // per (b, c) over D*H*W
Tensor se_norm(const Tensor& x, const SENormParams& p);

// Window machinery. Pads (D,H,W) up to multiples of w with zeros, cyclically
// rolls by -shift, and tiles into non-overlapping w^3 windows.
struct WindowLayout {
    Shape padded;             // [B, Dp, Hp, Wp, C] token-layout extents
    Shape original;           // [B, D, H, W, C]
    long window = 0;
    long shift = 0;
    long windows_per_batch = 0;
};

// x is channels-last tokens [B, D, H, W, C].
Tensor window_partition(const Tensor& x, long window, long shift, WindowLayout& layout);
Tensor window_reverse(const Tensor& windows, const WindowLayout& layout);

// Additive attention mask [nW, T, T] (0 allow / -1e9 deny) for the given
// padded grid: blocks pairs from different pre-roll regions and isolates
// zero-padded voxels. Returns undefined tensor when no masking is needed.
Tensor make_window_attn_mask(long D, long H, long W, long Dp, long Hp, long Wp,
                             long window, long shift);

// Relative-position index table for a w^3 window: idx[i*T+j] into (2w-1)^3.
std::vector<long> rel_pos_index(long window);

// x_windows [Nw, T, C], mask optional [nW, T, T] with Nw = B * nW.
Tensor window_attention(const Tensor& x_windows, const AttentionParams& p, const Tensor& mask);

// 2x spatial downsampling: gather 2^3 neighborhoods into 8C channels
// (offset-major, (d,h,w) minor order), layer-norm, project to out channels.
struct PatchMergeParams {
    LayerNormParams norm;     // over 8C
    LinearParams proj;        // 8C -> out
};
PatchMergeParams make_patch_merge(long c_in, long c_out, Rng& rng);
Tensor patch_merge_downsample(const Tensor& x, const PatchMergeParams& p);

// layout helpers between [B,C,D,H,W] and tokens [B,D,H,W,C]
Tensor to_tokens(const Tensor& x);
Tensor to_channels_first(const Tensor& x);

} // namespace lego

#endif
