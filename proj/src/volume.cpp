#include "legonet/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace lego {

Volume make_volume(std::array<long, 3> shape, double fill) {
    Volume v;
    v.shape = shape;
    v.origin_extent = shape;
    v.data.assign(static_cast<size_t>(shape[0] * shape[1] * shape[2]), fill);
    return v;
}

namespace {

constexpr char kMagic[4] = {'L', 'G', 'V', '1'};

void put_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void put_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }
uint32_t get_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
double get_f64(std::istream& is) {
    double v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

} // namespace

void save_volume(const std::string& path, const Volume& v) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for writing: " + path);
    os.write(kMagic, 4);
    for (long e : v.shape) put_u32(os, static_cast<uint32_t>(e));
    for (double s : v.spacing) put_f64(os, s);
    uint8_t flag = static_cast<uint8_t>(v.domain);
    os.write(reinterpret_cast<const char*>(&flag), 1);
    for (long e : v.origin_extent) put_u32(os, static_cast<uint32_t>(e));
    std::vector<float> payload(v.data.begin(), v.data.end());
    os.write(reinterpret_cast<const char*>(payload.data()),
             static_cast<std::streamsize>(payload.size() * 4));
    if (!os) throw std::runtime_error("write failed: " + path);
}

Volume load_volume(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("bad volume magic in " + path);
    Volume v;
    for (auto& e : v.shape) e = static_cast<long>(get_u32(is));
    for (auto& s : v.spacing) s = get_f64(is);
    uint8_t flag = 0;
    is.read(reinterpret_cast<char*>(&flag), 1);
    if (flag > 1) throw std::runtime_error("bad domain flag in " + path);
    v.domain = static_cast<IntensityDomain>(flag);
    for (auto& e : v.origin_extent) e = static_cast<long>(get_u32(is));
    if (!is) throw std::runtime_error("truncated header in " + path);
    for (double s : v.spacing)
        if (!(s > 0)) throw std::runtime_error("non-positive spacing in " + path);
    std::vector<float> payload(static_cast<size_t>(v.shape[0] * v.shape[1] * v.shape[2]));
    is.read(reinterpret_cast<char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * 4));
    if (is.gcount() != static_cast<std::streamsize>(payload.size() * 4))
        throw std::runtime_error("payload size mismatch in " + path);
    v.data.assign(payload.begin(), payload.end());
    return v;
}

Volume clip_normalize(const Volume& v) {
    if (v.domain == IntensityDomain::Normalized)
        throw std::invalid_argument("clip_normalize: volume is already normalized");
    Volume out = v;
    out.domain = IntensityDomain::Normalized;
    for (auto& x : out.data) x = std::clamp(x, -1024.0, 1024.0) / 1024.0;
    return out;
}

namespace {

double sample_trilinear(const Volume& v, double d, double h, double w) {
    auto clampi = [](long i, long n) { return std::clamp(i, 0L, n - 1); };
    long d0 = static_cast<long>(std::floor(d)), h0 = static_cast<long>(std::floor(h)),
         w0 = static_cast<long>(std::floor(w));
    double fd = d - d0, fh = h - h0, fw = w - w0;
    double acc = 0;
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
            for (int k = 0; k < 2; ++k) {
                double wt = (i ? fd : 1 - fd) * (j ? fh : 1 - fh) * (k ? fw : 1 - fw);
                if (wt == 0) continue;
                acc += wt * v.at(clampi(d0 + i, v.shape[0]), clampi(h0 + j, v.shape[1]),
                                 clampi(w0 + k, v.shape[2]));
            }
    return acc;
}

} // namespace

Volume resample_isotropic(const Volume& v) {
    std::array<long, 3> target;
    for (int a = 0; a < 3; ++a)
        target[a] = std::max(1L, std::lround(static_cast<double>(v.shape[a]) * v.spacing[a]));
    if (target == v.shape && v.spacing == std::array<double, 3>{1, 1, 1}) return v;
    Volume out = make_volume(target);
    out.spacing = {1, 1, 1};
    out.origin_extent = v.origin_extent;
    out.domain = v.domain;
    for (long d = 0; d < target[0]; ++d)
        for (long h = 0; h < target[1]; ++h)
            for (long w = 0; w < target[2]; ++w)
                out.at(d, h, w) =
                    sample_trilinear(v, d / v.spacing[0], h / v.spacing[1], w / v.spacing[2]);
    return out;
}

Volume resize(const Volume& v, std::array<long, 3> target, ResizeMode mode) {
    for (long e : target)
        if (e < 1) throw std::invalid_argument("resize: target extents must be positive");
    if (target == v.shape) return v;
    Volume out = make_volume(target);
    out.spacing = v.spacing;
    out.origin_extent = v.origin_extent;
    out.domain = v.domain;
    std::array<double, 3> scale;
    for (int a = 0; a < 3; ++a)
        scale[a] = static_cast<double>(v.shape[a]) / static_cast<double>(target[a]);
    for (long d = 0; d < target[0]; ++d)
        for (long h = 0; h < target[1]; ++h)
            for (long w = 0; w < target[2]; ++w) {
                double sd = (d + 0.5) * scale[0] - 0.5;
                double sh = (h + 0.5) * scale[1] - 0.5;
                double sw = (w + 0.5) * scale[2] - 0.5;
                if (mode == ResizeMode::Trilinear) {
                    out.at(d, h, w) = sample_trilinear(v, sd, sh, sw);
                } else {
                    long nd = std::clamp(std::lround(sd), 0L, v.shape[0] - 1);
                    long nh = std::clamp(std::lround(sh), 0L, v.shape[1] - 1);
                    long nw = std::clamp(std::lround(sw), 0L, v.shape[2] - 1);
                    out.at(d, h, w) = v.at(nd, nh, nw);
                }
            }
    return out;
}

std::vector<SynthCase> synth_tube_dataset(long n_cases, long volume_edge, Rng& rng) {
    if (volume_edge < 16) throw std::invalid_argument("synth_tube_dataset: edge must be >= 16");
    std::vector<SynthCase> out;
    const long e = volume_edge;
    for (long c = 0; c < n_cases; ++c) {
        SynthCase sc;
        sc.case_id = "case" + std::to_string(c);
        sc.image = make_volume({e, e, e});
        sc.mask = make_volume({e, e, e});
        sc.image.domain = IntensityDomain::Normalized;
        sc.mask.domain = IntensityDomain::Normalized;

        double radius = rng.uniform(1.0, 2.0);
        double peri = 3.0 * radius;
        // drift amplitude kept small so the tube stays inside the volume and
        // the mask stays one connected component
        double cx = e / 2.0 + rng.uniform(-e / 8.0, e / 8.0);
        double cy = e / 2.0 + rng.uniform(-e / 8.0, e / 8.0);
        double amp_x = rng.uniform(0.0, e / 10.0), amp_y = rng.uniform(0.0, e / 10.0);
        double ph_x = rng.uniform(0.0, 6.2831853), ph_y = rng.uniform(0.0, 6.2831853);
        double freq = rng.uniform(0.5, 1.5);

        double bg_ph = rng.uniform(0.0, 6.2831853);
        for (long d = 0; d < e; ++d) {
            double t = 6.2831853 * freq * d / e;
            double tx = cx + amp_x * std::sin(t + ph_x);
            double ty = cy + amp_y * std::sin(t + ph_y);
            for (long h = 0; h < e; ++h)
                for (long w = 0; w < e; ++w) {
                    double dist = std::hypot(h - ty, w - tx);
                    double bg = 0.15 * std::sin(0.2 * h + bg_ph) * std::cos(0.17 * w) - 0.4;
                    double tube = dist < radius ? 0.9 : (dist < radius + 1.0 ? 0.9 * (radius + 1.0 - dist) : 0.0);
                    double val = bg + tube + 0.05 * rng.normal();
                    sc.image.at(d, h, w) = std::clamp(val, -1.0, 1.0);
                    sc.mask.at(d, h, w) = dist <= peri ? 1.0 : 0.0;
                }
        }
        out.push_back(std::move(sc));
    }
    return out;
}

std::string manifest_csv(const std::vector<CaseRecord>& records) {
    std::ostringstream os;
    os << "case_id,image_path,mask_path,cohort\n";
    for (const auto& r : records)
        os << r.case_id << "," << r.image_path << "," << r.mask_path << "," << r.cohort << "\n";
    return os.str();
}

std::vector<CaseRecord> parse_manifest(const std::string& csv) {
    std::istringstream is(csv);
    std::string line;
    std::vector<CaseRecord> out;
    bool first = true;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (first) {
            first = false;
            continue;
        }
        std::istringstream ls(line);
        CaseRecord r;
        std::getline(ls, r.case_id, ',');
        std::getline(ls, r.image_path, ',');
        std::getline(ls, r.mask_path, ',');
        std::getline(ls, r.cohort, ',');
        out.push_back(std::move(r));
    }
    return out;
}

} // namespace lego
