#include "legonet/model.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace lego {

Version parse_version(const std::string& s) {
    if (s == "v1" || s == "V1") return Version::V1;
    if (s == "v2" || s == "V2") return Version::V2;
    if (s == "v3" || s == "V3") return Version::V3;
    throw std::invalid_argument("unknown version '" + s + "' (expected v1/v2/v3)");
}

std::string to_string(Version v) {
    switch (v) {
        case Version::V1: return "v1";
        case Version::V2: return "v2";
        case Version::V3: return "v3";
    }
    return "?";
}

void ModelConfig::validate() const {
    if (features[1] != 2 * features[0] || features[2] != 2 * features[1] ||
        features[3] != 2 * features[2])
        throw std::invalid_argument("config: features must double per stage");
    if (hidden <= features[3]) throw std::invalid_argument("config: hidden must exceed F4");
    if (window < 1) throw std::invalid_argument("config: window must be >= 1");
    if (out_channels < 1) throw std::invalid_argument("config: out_channels must be >= 1");
    for (long d : input_shape)
        if (d < 1) throw std::invalid_argument("config: input extents must be positive");
}

std::array<BlockKind, 4> ModelConfig::stage_kinds() const {
    switch (version) {
        case Version::V1: return {BlockKind::SE, BlockKind::UX, BlockKind::SE, BlockKind::UX};
        case Version::V2: return {BlockKind::SE, BlockKind::Swin, BlockKind::SE, BlockKind::Swin};
        case Version::V3: return {BlockKind::Swin, BlockKind::UX, BlockKind::Swin, BlockKind::UX};
    }
    return {};
}

long ModelConfig::stage_out_channels(long stage) const {
    return stage < 3 ? features[stage + 1] : hidden;
}

long ModelConfig::resolved_depth(long stage) const {
    if (stage_depths[stage] > 0) return stage_depths[stage];
    BlockKind k = stage_kinds()[stage];
    switch (k) {
        case BlockKind::SE:  return stage == 2 ? 36 : 6;  // deep CNN stages
        case BlockKind::Swin: return 1;
        case BlockKind::UX:  return stage == 3 ? 1 : 2;
    }
    return 1;
}

long ModelConfig::heads_for(long channels) const {
    return std::max(1L, channels / head_divisor);
}

ModelConfig tiny_config(Version v, long window) {
    ModelConfig c;
    c.version = v;
    c.features = {8, 16, 32, 64};
    c.hidden = 128;
    c.window = window;
    c.input_shape = {32, 32, 32};
    c.stage_depths = {1, 1, 2, 1};
    return c;
}

LegoNet build(const ModelConfig& config, uint64_t seed, HeadKind head) {
    config.validate();
    LegoNet m;
    m.config = config;
    m.head_kind = head;
    Rng rng(seed);

    m.stem = make_stem(config.features[0], config.se_reduction, rng, m.params, "stem");

    auto kinds = config.stage_kinds();
    long c_in = config.features[0];
    for (long s = 0; s < 4; ++s) {
        long c_out = config.stage_out_channels(s);
        BlockSpec spec;
        spec.kind = kinds[s];
        spec.in_channels = c_in;
        spec.out_channels = c_out;
        spec.depth_units = config.resolved_depth(s);
        spec.window = config.window;
        spec.heads = config.heads_for(c_out);
        m.stages[s] = make_encoder_stage(spec, config.se_reduction, rng, m.params,
                                         "enc" + std::to_string(s + 1));
        c_in = c_out;
    }

    // decoder, deepest first: S->F4, F4->F3, F3->F2, F2->F1
    long deep = config.hidden;
    for (long s = 0; s < 4; ++s) {
        long skip = s < 3 ? config.features[3 - s] : config.features[0];
        m.decoder[s] = make_decoder_stage(deep, skip, config.se_reduction, rng, m.params,
                                          "dec" + std::to_string(4 - s));
        deep = skip;
    }

    const char* head_name = head == HeadKind::Segmentation ? "head" : "recon_head";
    m.head = make_conv3d(config.features[0], config.out_channels, 1, 1, 0, 1, rng);
    m.params.add(std::string(head_name) + ".weight", m.head.weight);
    m.params.add(std::string(head_name) + ".bias", m.head.bias);
    return m;
}

Tensor forward(const LegoNet& model, const Tensor& x) {
    if (x.dim() != 5 || x.shape()[1] != 1)
        throw std::invalid_argument("forward: expected [B,1,D,H,W]");
    // odd extents are padded inside each downsample and cropped on the way back up
    Tensor e0 = stem_forward(x, model.stem);
    Tensor e1 = encoder_stage_forward(e0, model.stages[0]);
    Tensor e2 = encoder_stage_forward(e1, model.stages[1]);
    Tensor e3 = encoder_stage_forward(e2, model.stages[2]);
    Tensor e4 = encoder_stage_forward(e3, model.stages[3]);

    Tensor d = decoder_stage_forward(e4, e3, model.decoder[0]);
    d = decoder_stage_forward(d, e2, model.decoder[1]);
    d = decoder_stage_forward(d, e1, model.decoder[2]);
    d = decoder_stage_forward(d, e0, model.decoder[3]);

    return conv3d(d, model.head);
}

// -------------------------------------------------------------------- counts

namespace {

std::string group_of(const std::string& name) {
    auto dot = name.find('.');
    std::string head = name.substr(0, dot);
    if (head.rfind("dec", 0) == 0) return "decoder";
    return head;
}

} // namespace

CountTable param_count(const LegoNet& model) {
    CountTable t;
    std::vector<std::pair<std::string, double>> rows;
    auto row = [&](const std::string& g) -> double& {
        for (auto& [k, v] : rows)
            if (k == g) return v;
        rows.emplace_back(g, 0.0);
        return rows.back().second;
    };
    for (const auto& [name, tensor] : model.params.entries) {
        row(group_of(name)) += static_cast<double>(tensor.numel());
        t.total += static_cast<double>(tensor.numel());
    }
    t.rows = std::move(rows);
    return t;
}

CountTable flop_count(const ModelConfig& config) {
    config.validate();
    CountTable t;
    auto add = [&](const std::string& g, double v) {
        for (auto& [k, x] : t.rows)
            if (k == g) { x += v; t.total += v; return; }
        t.rows.emplace_back(g, v);
        t.total += v;
    };

    long D = (config.input_shape[0] + 15) / 16 * 16;
    long H = (config.input_shape[1] + 15) / 16 * 16;
    long W = (config.input_shape[2] + 15) / 16 * 16;
    double vox = double(D) * H * W;

    auto conv_macs = [](double cin, double cout, double k, double out_vox, double groups) {
        return cout * (cin / groups) * k * k * k * out_vox;
    };
    auto se_norm_macs = [&](double c, double out_vox, long r) {
        // squeeze pool + two bottleneck matmuls + scale/shift
        return c * out_vox + 2.0 * c * (c / r) + 2.0 * c * out_vox;
    };

    // stem at full resolution
    long F1 = config.features[0];
    add("stem", conv_macs(1, F1, 7, vox, 1) + se_norm_macs(F1, vox, config.se_reduction) +
                    conv_macs(F1, F1, 3, vox, 1) + se_norm_macs(F1, vox, config.se_reduction));

    auto kinds = config.stage_kinds();
    long c_in = F1;
    double svox = vox;
    for (long s = 0; s < 4; ++s) {
        long c = config.stage_out_channels(s);
        svox /= 8.0;
        long depth = config.resolved_depth(s);
        std::string g = "enc" + std::to_string(s + 1);
        // downsample
        if (kinds[s] == BlockKind::Swin)
            add(g, 8.0 * c_in * c * svox);  // patch-merge projection
        else
            add(g, conv_macs(c_in, c, 2, svox, 1));
        switch (kinds[s]) {
            case BlockKind::SE:
                add(g, depth * (conv_macs(c, c, 3, svox, 1) +
                                se_norm_macs(c, svox, config.se_reduction)));
                break;
            case BlockKind::Swin: {
                double tokens = svox;
                double w3 = double(config.window) * config.window * config.window;
                // per attention sublayer: qkv + QK^T + AV + proj
                double attn = 3.0 * c * c * tokens + 2.0 * tokens * w3 * c + c * c * tokens;
                double mlp = 8.0 * c * c * tokens;
                add(g, depth * 2.0 * (attn + mlp));  // (W, SW) both carry an MLP
                break;
            }
            case BlockKind::UX:
                add(g, depth * (conv_macs(c, c, 7, svox, c) + 8.0 * c * c * svox));
                break;
        }
        c_in = c;
    }

    // decoder
    double dvox = svox;
    long deep = config.hidden;
    for (long s = 0; s < 4; ++s) {
        long skip = s < 3 ? config.features[3 - s] : config.features[0];
        dvox *= 8.0;
        add("decoder", deep * skip * dvox +  // transposed conv, one tap per output voxel
                           conv_macs(2 * skip, skip, 3, dvox, 1) +
                           conv_macs(skip, skip, 3, dvox, 1) +
                           2.0 * se_norm_macs(skip, dvox, config.se_reduction));
        deep = skip;
    }
    add("head", double(F1) * config.out_channels * vox);
    return t;
}

uint64_t param_hash(const LegoNet& model) {
    uint64_t h = 1469598103934665603ULL;
    for (const auto& [name, t] : model.params.entries) {
        for (char c : name) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ULL;
        for (double v : t.data()) {
            uint64_t bits;
            std::memcpy(&bits, &v, 8);
            h = (h ^ bits) * 1099511628211ULL;
        }
    }
    return h;
}

// ---------------------------------------------------------------- container

namespace {

constexpr char kMagic[4] = {'L', 'G', 'C', 'K'};
constexpr uint32_t kFormatVersion = 1;

void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void write_str(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
uint32_t read_u32(std::istream& is) {
    uint32_t v;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
uint64_t read_u64(std::istream& is) {
    uint64_t v;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
std::string read_str(std::istream& is) {
    uint32_t n = read_u32(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    return s;
}

std::string config_text(const ModelConfig& c, HeadKind head) {
    std::ostringstream os;
    os << "version = " << to_string(c.version) << "\n";
    os << "features = " << c.features[0] << "," << c.features[1] << "," << c.features[2] << ","
       << c.features[3] << "\n";
    os << "hidden = " << c.hidden << "\n";
    os << "window = " << c.window << "\n";
    os << "head_divisor = " << c.head_divisor << "\n";
    os << "input_shape = " << c.input_shape[0] << "," << c.input_shape[1] << ","
       << c.input_shape[2] << "\n";
    os << "out_channels = " << c.out_channels << "\n";
    os << "stage_depths = " << c.stage_depths[0] << "," << c.stage_depths[1] << ","
       << c.stage_depths[2] << "," << c.stage_depths[3] << "\n";
    os << "se_reduction = " << c.se_reduction << "\n";
    os << "phase = " << (head == HeadKind::Segmentation ? "segmentation" : "pretrain") << "\n";
    return os.str();
}

} // namespace

void save_checkpoint(const std::string& path, const LegoNet& model,
                     const std::map<std::string, std::string>& extra_header) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    os.write(kMagic, 4);
    write_u32(os, kFormatVersion);
    std::string header = config_text(model.config, model.head_kind);
    for (const auto& [k, v] : extra_header) header += k + " = " + v + "\n";
    write_str(os, header);
    write_u32(os, static_cast<uint32_t>(model.params.entries.size()));
    for (const auto& [name, t] : model.params.entries) {
        write_str(os, name);
        write_str(os, "f64");
        write_u32(os, static_cast<uint32_t>(t.dim()));
        for (long e : t.shape()) write_u64(os, static_cast<uint64_t>(e));
        os.write(reinterpret_cast<const char*>(t.data().data()),
                 static_cast<std::streamsize>(t.data().size() * 8));
    }
    if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("bad checkpoint magic in " + path);
    uint32_t fv = read_u32(is);
    if (fv != kFormatVersion)
        throw std::runtime_error("unsupported checkpoint format version " + std::to_string(fv));
    Checkpoint ck;
    std::istringstream hs(read_str(is));
    std::string line;
    while (std::getline(hs, line)) {
        auto eq = line.find(" = ");
        if (eq != std::string::npos) ck.header[line.substr(0, eq)] = line.substr(eq + 3);
    }
    uint32_t count = read_u32(is);
    for (uint32_t i = 0; i < count; ++i) {
        std::string name = read_str(is);
        std::string dtype = read_str(is);
        if (dtype != "f64") throw std::runtime_error("unsupported dtype " + dtype);
        uint32_t nd = read_u32(is);
        Shape shape(nd);
        for (uint32_t d = 0; d < nd; ++d) shape[d] = static_cast<long>(read_u64(is));
        std::vector<double> data(numel_of(shape));
        is.read(reinterpret_cast<char*>(data.data()),
                static_cast<std::streamsize>(data.size() * 8));
        if (!is) throw std::runtime_error("truncated checkpoint payload in " + path);
        ck.tensors.emplace_back(name, Tensor::from(shape, std::move(data)));
    }
    return ck;
}

std::vector<std::string> load_checkpoint(LegoNet& model, const std::string& path,
                                         bool require_all) {
    Checkpoint ck = read_checkpoint(path);
    std::map<std::string, Tensor> by_name;
    for (auto& [n, t] : ck.tensors) by_name.emplace(n, t);
    std::vector<std::string> matched;
    for (auto& [name, t] : model.params.entries) {
        auto it = by_name.find(name);
        if (it == by_name.end()) {
            if (require_all)
                throw std::runtime_error("checkpoint missing parameter " + name);
            continue;
        }
        if (it->second.shape() != t.shape())
            throw std::runtime_error("checkpoint shape mismatch for " + name + ": " +
                                     shape_str(it->second.shape()) + " vs " +
                                     shape_str(t.shape()));
        t.data() = it->second.data();
        matched.push_back(name);
    }
    return matched;
}

} // namespace lego
