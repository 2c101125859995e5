#ifndef LEGONET_MODEL_HPP
#define LEGONET_MODEL_HPP

#include "legonet/blocks.hpp"

#include <array>
#include <map>
#include <string>

namespace lego {

enum class Version { V1, V2, V3 };

Version parse_version(const std::string& s);
std::string to_string(Version v);

struct ModelConfig {
    Version version = Version::V2;
    std::array<long, 4> features{24, 48, 96, 192};  // F1..F4
    long hidden = 768;                              // S
    long window = 6;
    long head_divisor = 32;                         // heads = max(1, C / head_divisor)
    std::array<long, 3> input_shape{96, 96, 96};
    long out_channels = 1;
    // per-stage depth units; 0 = resolve by block kind (SE runs deep CNN
    // stages, attention/large-kernel stages stay shallow)
    std::array<long, 4> stage_depths{0, 0, 0, 0};
    long se_reduction = 2;

    void validate() const;
    std::array<BlockKind, 4> stage_kinds() const;
    long stage_out_channels(long stage) const;      // F2, F3, F4, S
    long resolved_depth(long stage) const;
    long heads_for(long channels) const;
};

// Small-scale profile used by the desk training runs and smoke tests.
ModelConfig tiny_config(Version v, long window = 4);

enum class HeadKind { Segmentation, Reconstruction };

struct LegoNet {
    ModelConfig config;
    HeadKind head_kind = HeadKind::Segmentation;
    StemParams stem;
    std::array<EncoderStage, 4> stages;
    std::array<DecoderStage, 4> decoder;            // deepest first
    Conv3dParams head;                              // 1^3 conv, F1 -> out
    ParamRegistry params;
};

// Deterministic build given seed. Encoder/decoder parameter names are
// identical across head kinds so pretrained weights transfer by name.
LegoNet build(const ModelConfig& config, uint64_t seed,
              HeadKind head = HeadKind::Segmentation);

// [B,1,D,H,W] -> logits/intensities [B,out,D,H,W]; odd extents are padded
// inside each downsample and cropped on the way back up.
Tensor forward(const LegoNet& model, const Tensor& x);

// ---- analyzer ----

struct CountTable {
    std::vector<std::pair<std::string, double>> rows;  // group -> count
    double total = 0;
};

CountTable param_count(const LegoNet& model);

// Analytic FLOP estimate under the MAC convention (1 multiply-add = 1).
CountTable flop_count(const ModelConfig& config);

uint64_t param_hash(const LegoNet& model);

// ---- checkpoint container ----
// magic LGCK, u32 format version, header text (key=value lines), then
// named little-endian float64 blobs. Round-trips bit-exactly.
void save_checkpoint(const std::string& path, const LegoNet& model,
                     const std::map<std::string, std::string>& extra_header = {});
struct Checkpoint {
    std::map<std::string, std::string> header;
    std::vector<std::pair<std::string, Tensor>> tensors;
};
Checkpoint read_checkpoint(const std::string& path);
// Copies every name-matching tensor into the model; returns matched names.
std::vector<std::string> load_checkpoint(LegoNet& model, const std::string& path,
                                         bool require_all = true);

} // namespace lego

#endif
