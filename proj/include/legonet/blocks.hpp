#ifndef LEGONET_BLOCKS_HPP
#define LEGONET_BLOCKS_HPP

#include "legonet/nn.hpp"

#include <string>
#include <vector>

namespace lego {

enum class BlockKind { SE, Swin, UX };

std::string to_string(BlockKind k);

struct BlockSpec {
    BlockKind kind = BlockKind::SE;
    long in_channels = 0;
    long out_channels = 0;
    long depth_units = 1;   // SE: residual conv units; Swin: (W,SW) pairs; UX: (DWC,DCS) pairs
    long window = 0;        // Swin only
    long heads = 1;         // Swin only
};

// Named parameter registry shared by checkpointing and the optimizer.
struct ParamRegistry {
    std::vector<std::pair<std::string, Tensor>> entries;
    void add(const std::string& name, const Tensor& t) { entries.emplace_back(name, t); }
};

// One SE residual unit: v <- se_norm(relu(conv3x3x3(v))) + proj(v)
struct SEUnit {
    Conv3dParams conv;      // 3^3, same padding
    SENormParams norm;
    Conv3dParams proj;      // 1^3 when channels change; weight undefined => identity
};

struct SEBlock {
    std::vector<SEUnit> units;
};

// One Swin pair: W-MSA sublayer + MLP, then SW-MSA sublayer + MLP,
// all pre-LN with residuals on channels-last tokens.
struct SwinPair {
    LayerNormParams norm1;
    AttentionParams attn_w;     // shift = 0
    LayerNormParams norm2;
    LinearParams mlp1_w, mlp2_w;
    LayerNormParams norm3;
    AttentionParams attn_sw;    // shift = window/2
    LayerNormParams norm4;
    LinearParams mlp1_sw, mlp2_sw;
};

struct SwinBlock {
    std::vector<SwinPair> pairs;
    long window = 0;
};

// One UX pair: DWC (depthwise 7^3) sublayer + DCS (1^3 expand-GELU-1^3)
// sublayer, both pre-LN with residuals.
struct UXPair {
    LayerNormParams norm1;
    Conv3dParams dwc;           // depthwise, k=7, pad=3
    LayerNormParams norm2;
    Conv3dParams dcs_expand;    // 1^3, C -> 4C
    Conv3dParams dcs_reduce;    // 1^3, 4C -> C
};

struct UXBlock {
    std::vector<UXPair> pairs;
};

struct StemParams {
    Conv3dParams conv1;         // k=7 pad=3, 1 -> F1
    SENormParams norm1;
    Conv3dParams conv2;         // k=3 pad=1, F1 -> F1
    SENormParams norm2;
};

// Block body at constant channels/resolution, preceded by the stage-owned
// downsample (patch merging for Swin stages, strided k=2 conv otherwise).
struct EncoderStage {
    BlockSpec spec;
    Conv3dParams down_conv;     // SE/UX stages
    PatchMergeParams down_merge;  // Swin stages
    bool uses_merge = false;
    SEBlock se;
    SwinBlock swin;
    UXBlock ux;
};

struct DecoderStage {
    Tensor up_weight;           // [C_deep, C_skip, 2,2,2]
    Tensor up_bias;             // [C_skip]
    Conv3dParams conv1;         // 2*C_skip -> C_skip, k=3
    SENormParams norm1;
    Conv3dParams conv2;         // C_skip -> C_skip, k=3
    SENormParams norm2;
};

// builders register every learnable tensor under `prefix.`
SEBlock make_se_block(long c_in, long c_out, long units, long se_reduction, Rng& rng,
                      ParamRegistry& reg, const std::string& prefix);
SwinBlock make_swin_block(long c, long pairs, long window, long heads, Rng& rng,
                          ParamRegistry& reg, const std::string& prefix);
UXBlock make_ux_block(long c, long pairs, Rng& rng, ParamRegistry& reg,
                      const std::string& prefix);
StemParams make_stem(long f1, long se_reduction, Rng& rng, ParamRegistry& reg,
                     const std::string& prefix);
EncoderStage make_encoder_stage(const BlockSpec& spec, long se_reduction, Rng& rng,
                                ParamRegistry& reg, const std::string& prefix);
DecoderStage make_decoder_stage(long c_deep, long c_skip, long se_reduction, Rng& rng,
                                ParamRegistry& reg, const std::string& prefix);

Tensor se_block_forward(const Tensor& x, const SEBlock& b);
Tensor swin_block_forward(const Tensor& x, const SwinBlock& b);
Tensor ux_block_forward(const Tensor& x, const UXBlock& b);
Tensor stem_forward(const Tensor& x, const StemParams& p);
Tensor encoder_stage_forward(const Tensor& x, const EncoderStage& s);
Tensor decoder_stage_forward(const Tensor& deep, const Tensor& skip, const DecoderStage& s);

} // namespace lego

#endif
