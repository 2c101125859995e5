#include "legonet/blocks.hpp"

#include <stdexcept>

namespace lego {

std::string to_string(BlockKind k) {
    switch (k) {
        case BlockKind::SE: return "SE";
        case BlockKind::Swin: return "Swin";
        case BlockKind::UX: return "UX";
    }
    return "?";
}

namespace {

void reg_conv(ParamRegistry& reg, const std::string& prefix, const Conv3dParams& p) {
    reg.add(prefix + ".weight", p.weight);
    if (p.bias.defined()) reg.add(prefix + ".bias", p.bias);
}
void reg_linear(ParamRegistry& reg, const std::string& prefix, const LinearParams& p) {
    reg.add(prefix + ".weight", p.weight);
    if (p.bias.defined()) reg.add(prefix + ".bias", p.bias);
}
void reg_ln(ParamRegistry& reg, const std::string& prefix, const LayerNormParams& p) {
    reg.add(prefix + ".gamma", p.gamma);
    reg.add(prefix + ".beta", p.beta);
}
void reg_se(ParamRegistry& reg, const std::string& prefix, const SENormParams& p) {
    reg.add(prefix + ".reduce", p.reduce_weight);
    reg.add(prefix + ".gamma", p.gamma_weight);
    reg.add(prefix + ".beta", p.beta_weight);
}
void reg_attn(ParamRegistry& reg, const std::string& prefix, const AttentionParams& p) {
    reg.add(prefix + ".qkv", p.qkv_weight);
    reg.add(prefix + ".proj", p.proj_weight);
    reg.add(prefix + ".rel_pos_bias", p.rel_pos_bias);
}

} // namespace

SEBlock make_se_block(long c_in, long c_out, long units, long se_reduction, Rng& rng,
                      ParamRegistry& reg, const std::string& prefix) {
    if (units < 1) throw std::invalid_argument("se_block: depth_units must be >= 1");
    SEBlock b;
    long c = c_in;
    for (long u = 0; u < units; ++u) {
        SEUnit unit;
        unit.conv = make_conv3d(c, c_out, 3, 1, 1, 1, rng);
        unit.norm = make_se_norm(c_out, se_reduction, rng);
        if (c != c_out) unit.proj = make_conv3d(c, c_out, 1, 1, 0, 1, rng, false);
        std::string up = prefix + ".unit" + std::to_string(u);
        reg_conv(reg, up + ".conv", unit.conv);
        reg_se(reg, up + ".norm", unit.norm);
        if (unit.proj.weight.defined()) reg_conv(reg, up + ".proj", unit.proj);
        b.units.push_back(std::move(unit));
        c = c_out;
    }
    return b;
}

SwinBlock make_swin_block(long c, long pairs, long window, long heads, Rng& rng,
                          ParamRegistry& reg, const std::string& prefix) {
    SwinBlock b;
    b.window = window;
    long shift = window / 2;
    for (long i = 0; i < pairs; ++i) {
        SwinPair p;
        p.norm1 = make_layer_norm(c);
        p.attn_w = make_attention(c, heads, window, 0, rng);
        p.norm2 = make_layer_norm(c);
        p.mlp1_w = make_linear(c, 4 * c, rng);
        p.mlp2_w = make_linear(4 * c, c, rng);
        p.norm3 = make_layer_norm(c);
        p.attn_sw = make_attention(c, heads, window, shift, rng);
        p.norm4 = make_layer_norm(c);
        p.mlp1_sw = make_linear(c, 4 * c, rng);
        p.mlp2_sw = make_linear(4 * c, c, rng);
        std::string pp = prefix + ".pair" + std::to_string(i);
        reg_ln(reg, pp + ".norm1", p.norm1);
        reg_attn(reg, pp + ".wmsa", p.attn_w);
        reg_ln(reg, pp + ".norm2", p.norm2);
        reg_linear(reg, pp + ".mlp1_w", p.mlp1_w);
        reg_linear(reg, pp + ".mlp2_w", p.mlp2_w);
        reg_ln(reg, pp + ".norm3", p.norm3);
        reg_attn(reg, pp + ".swmsa", p.attn_sw);
        reg_ln(reg, pp + ".norm4", p.norm4);
        reg_linear(reg, pp + ".mlp1_sw", p.mlp1_sw);
        reg_linear(reg, pp + ".mlp2_sw", p.mlp2_sw);
        b.pairs.push_back(std::move(p));
    }
    return b;
}

UXBlock make_ux_block(long c, long pairs, Rng& rng, ParamRegistry& reg,
                      const std::string& prefix) {
    UXBlock b;
    for (long i = 0; i < pairs; ++i) {
        UXPair p;
        p.norm1 = make_layer_norm(c);
        p.dwc = make_conv3d(c, c, 7, 1, 3, c, rng);
        p.norm2 = make_layer_norm(c);
        p.dcs_expand = make_conv3d(c, 4 * c, 1, 1, 0, 1, rng);
        p.dcs_reduce = make_conv3d(4 * c, c, 1, 1, 0, 1, rng);
        std::string pp = prefix + ".pair" + std::to_string(i);
        reg_ln(reg, pp + ".norm1", p.norm1);
        reg_conv(reg, pp + ".dwc", p.dwc);
        reg_ln(reg, pp + ".norm2", p.norm2);
        reg_conv(reg, pp + ".dcs_expand", p.dcs_expand);
        reg_conv(reg, pp + ".dcs_reduce", p.dcs_reduce);
        b.pairs.push_back(std::move(p));
    }
    return b;
}

StemParams make_stem(long f1, long se_reduction, Rng& rng, ParamRegistry& reg,
                     const std::string& prefix) {
    StemParams p;
    p.conv1 = make_conv3d(1, f1, 7, 1, 3, 1, rng);
    p.norm1 = make_se_norm(f1, se_reduction, rng);
    p.conv2 = make_conv3d(f1, f1, 3, 1, 1, 1, rng);
    p.norm2 = make_se_norm(f1, se_reduction, rng);
    reg_conv(reg, prefix + ".conv1", p.conv1);
    reg_se(reg, prefix + ".norm1", p.norm1);
    reg_conv(reg, prefix + ".conv2", p.conv2);
    reg_se(reg, prefix + ".norm2", p.norm2);
    return p;
}

EncoderStage make_encoder_stage(const BlockSpec& spec, long se_reduction, Rng& rng,
                                ParamRegistry& reg, const std::string& prefix) {
    EncoderStage s;
    s.spec = spec;
    s.uses_merge = spec.kind == BlockKind::Swin;
    if (s.uses_merge) {
        s.down_merge = make_patch_merge(spec.in_channels, spec.out_channels, rng);
        reg_ln(reg, prefix + ".down.norm", s.down_merge.norm);
        reg_linear(reg, prefix + ".down.proj", s.down_merge.proj);
    } else {
        s.down_conv = make_conv3d(spec.in_channels, spec.out_channels, 2, 2, 0, 1, rng);
        reg_conv(reg, prefix + ".down", s.down_conv);
    }
    switch (spec.kind) {
        case BlockKind::SE:
            s.se = make_se_block(spec.out_channels, spec.out_channels, spec.depth_units,
                                 se_reduction, rng, reg, prefix + ".se");
            break;
        case BlockKind::Swin:
            s.swin = make_swin_block(spec.out_channels, spec.depth_units, spec.window, spec.heads,
                                     rng, reg, prefix + ".swin");
            break;
        case BlockKind::UX:
            s.ux = make_ux_block(spec.out_channels, spec.depth_units, rng, reg, prefix + ".ux");
            break;
    }
    return s;
}

DecoderStage make_decoder_stage(long c_deep, long c_skip, long se_reduction, Rng& rng,
                                ParamRegistry& reg, const std::string& prefix) {
    DecoderStage s;
    double limit = std::sqrt(6.0 / static_cast<double>(c_deep * 8));
    std::vector<double> w(c_deep * c_skip * 8);
    for (auto& v : w) v = rng.uniform(-limit, limit);
    s.up_weight = Tensor::from({c_deep, c_skip, 2, 2, 2}, std::move(w), true);
    s.up_bias = Tensor::zeros({c_skip}, true);
    s.conv1 = make_conv3d(2 * c_skip, c_skip, 3, 1, 1, 1, rng);
    s.norm1 = make_se_norm(c_skip, se_reduction, rng);
    s.conv2 = make_conv3d(c_skip, c_skip, 3, 1, 1, 1, rng);
    s.norm2 = make_se_norm(c_skip, se_reduction, rng);
    reg.add(prefix + ".up.weight", s.up_weight);
    reg.add(prefix + ".up.bias", s.up_bias);
    reg_conv(reg, prefix + ".conv1", s.conv1);
    reg_se(reg, prefix + ".norm1", s.norm1);
    reg_conv(reg, prefix + ".conv2", s.conv2);
    reg_se(reg, prefix + ".norm2", s.norm2);
    return s;
}

// ---------------------------------------------------------------- forwards

Tensor se_block_forward(const Tensor& x, const SEBlock& b) {
    Tensor v = x;
    for (const auto& u : b.units) {
        Tensor out = se_norm(relu(conv3d(v, u.conv)), u.norm);
        Tensor res = u.proj.weight.defined() ? conv3d(v, u.proj) : v;
        v = add(out, res);
    }
    return v;
}

namespace {

Tensor attn_sublayer(const Tensor& tok, const LayerNormParams& ln, const AttentionParams& ap) {
    Tensor n = layer_norm(tok, ln);
    WindowLayout lay;
    Tensor w = window_partition(n, ap.window, ap.shift, lay);
    Tensor mask = make_window_attn_mask(lay.original[1], lay.original[2], lay.original[3],
                                        lay.padded[1], lay.padded[2], lay.padded[3], ap.window,
                                        ap.shift);
    Tensor a = window_attention(w, ap, mask);
    return add(window_reverse(a, lay), tok);
}

Tensor mlp_sublayer(const Tensor& tok, const LayerNormParams& ln, const LinearParams& fc1,
                    const LinearParams& fc2) {
    return add(linear(gelu(linear(layer_norm(tok, ln), fc1)), fc2), tok);
}

} // namespace

Tensor swin_block_forward(const Tensor& x, const SwinBlock& b) {
    Tensor tok = to_tokens(x);
    for (const auto& p : b.pairs) {
        tok = attn_sublayer(tok, p.norm1, p.attn_w);
        tok = mlp_sublayer(tok, p.norm2, p.mlp1_w, p.mlp2_w);
        tok = attn_sublayer(tok, p.norm3, p.attn_sw);
        tok = mlp_sublayer(tok, p.norm4, p.mlp1_sw, p.mlp2_sw);
    }
    return to_channels_first(tok);
}

Tensor ux_block_forward(const Tensor& x, const UXBlock& b) {
    Tensor v = x;
    for (const auto& p : b.pairs) {
        // DWC sublayer: pre-LN on tokens, depthwise conv channels-first
        Tensor n = to_channels_first(layer_norm(to_tokens(v), p.norm1));
        v = add(conv3d(n, p.dwc), v);
        // DCS sublayer: pointwise expand, GELU, pointwise reduce
        Tensor m = to_channels_first(layer_norm(to_tokens(v), p.norm2));
        v = add(conv3d(gelu(conv3d(m, p.dcs_expand)), p.dcs_reduce), v);
    }
    return v;
}

Tensor stem_forward(const Tensor& x, const StemParams& p) {
    if (x.shape()[1] != 1) throw std::invalid_argument("stem: expected single input channel");
    Tensor v = relu(se_norm(conv3d(x, p.conv1), p.norm1));
    return relu(se_norm(conv3d(v, p.conv2), p.norm2));
}

Tensor encoder_stage_forward(const Tensor& x, const EncoderStage& s) {
    Tensor v;
    if (s.uses_merge) {
        v = patch_merge_downsample(x, s.down_merge);
    } else {
        // strided k=2 conv needs even extents
        long D = x.shape()[2], H = x.shape()[3], W = x.shape()[4];
        Tensor t = x;
        if (D % 2 || H % 2 || W % 2)
            t = pad(t, {{0, 0}, {0, 0}, {0, D % 2}, {0, H % 2}, {0, W % 2}});
        v = conv3d(t, s.down_conv);
    }
    switch (s.spec.kind) {
        case BlockKind::SE: return se_block_forward(v, s.se);
        case BlockKind::Swin: return swin_block_forward(v, s.swin);
        case BlockKind::UX: return ux_block_forward(v, s.ux);
    }
    return v;
}

Tensor decoder_stage_forward(const Tensor& deep, const Tensor& skip, const DecoderStage& s) {
    for (int a = 2; a < 5; ++a) {
        long twice = 2 * deep.shape()[a];
        // the encoder pads odd extents before halving, so doubling may overshoot by one
        if (twice != skip.shape()[a] && twice != skip.shape()[a] + 1)
            throw std::invalid_argument("decoder_stage: deep resolution must be half of skip's");
    }
    Tensor up = transposed_conv3d(deep, s.up_weight, s.up_bias);
    if (up.shape()[2] != skip.shape()[2] || up.shape()[3] != skip.shape()[3] ||
        up.shape()[4] != skip.shape()[4])
        up = slice(up, {0, 0, 0, 0, 0},
                   {up.shape()[0], up.shape()[1], skip.shape()[2], skip.shape()[3],
                    skip.shape()[4]});
    Tensor v = concat({up, skip}, 1);
    v = relu(se_norm(conv3d(v, s.conv1), s.norm1));
    return relu(se_norm(conv3d(v, s.conv2), s.norm2));
}

} // namespace lego
