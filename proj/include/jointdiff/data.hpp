#ifndef JOINTDIFF_DATA_HPP
#define JOINTDIFF_DATA_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "jointdiff/diffusion.hpp"
#include "jointdiff/error.hpp"
#include "jointdiff/rng.hpp"
#include "jointdiff/tensor.hpp"

namespace jointdiff {

// ---------------------------------------------------------------------------
// normalization and binning

// map raw intensities to [-1, 1] anchored at the lo/hi percentiles (percent
// units; defaults are the 0.05th and 99.5th percentiles), clamping outside
inline Tensor percentile_normalize(const Tensor& image, double lo_pct = 0.05,
                                   double hi_pct = 99.5) {
    if (image.size() < 2) throw config_error("percentile_normalize: image too small");
    std::vector<double> sorted(image.data(), image.data() + image.size());
    std::sort(sorted.begin(), sorted.end());

    auto percentile = [&](double q) {
        const double pos = q / 100.0 * double(sorted.size() - 1);
        const std::size_t lo = std::size_t(pos);
        const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
        const double frac = pos - double(lo);
        return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
    };
    const double p_lo = percentile(lo_pct);
    const double p_hi = percentile(hi_pct);
    if (!(p_hi > p_lo))
        throw config_error("percentile_normalize: degenerate image (P_lo == P_hi)");

    Tensor out(image.c(), image.h(), image.w());
    for (std::size_t i = 0; i < image.size(); ++i) {
        const double v = 2.0 * (image[i] - p_lo) / (p_hi - p_lo) - 1.0;
        out[i] = std::clamp(v, -1.0, 1.0);
    }
    return out;
}

// axial slice index -> z bin: floor(z_index * n_z / z_total), clamped
inline int compute_z_bin(int z_index, int z_total, int n_z = 30) {
    if (z_total < 1) throw range_error("compute_z_bin: z_total must be >= 1");
    if (z_index < 0 || z_index >= z_total)
        throw range_error("compute_z_bin: z_index " + std::to_string(z_index) +
                          " outside [0, " + std::to_string(z_total) + ")");
    const std::int64_t bin = std::int64_t(z_index) * n_z / z_total;
    return int(std::min<std::int64_t>(bin, n_z - 1));
}

// ---------------------------------------------------------------------------
// slice archive: manifest + one float32 payload file per channel per slice

struct SliceRecord {
    std::string subject_id;
    int z_index = 0;
    int z_total = 1;
    int z_bin = 0;
    int pathology = 0;
    std::string image_file; // relative to the archive directory
    std::string mask_file;
};

class SliceArchive {
public:
    std::string dir;
    int height = 0;
    int width = 0;
    int n_z = 30;
    std::map<std::string, std::string> meta; // free-form provenance
    std::vector<SliceRecord> records;

    Tensor load_image(std::size_t i) const { return load_payload(records.at(i).image_file); }
    Tensor load_mask(std::size_t i) const { return load_payload(records.at(i).mask_file); }

    JointSample load_joint(std::size_t i) const {
        JointSample js;
        js.image = load_image(i);
        js.mask = load_mask(i);
        return js;
    }

    std::vector<std::string> subject_ids() const {
        std::set<std::string> s;
        for (const auto& r : records) s.insert(r.subject_id);
        return {s.begin(), s.end()};
    }

private:
    Tensor load_payload(const std::string& rel) const {
        const std::string path = dir + "/" + rel;
        std::FILE* f = std::fopen(path.c_str(), "rb");
        if (!f) throw io_error("archive payload missing: " + path);
        Tensor t = Tensor::plane(height, width);
        std::vector<float> buf(t.size());
        const std::size_t got = std::fread(buf.data(), sizeof(float), buf.size(), f);
        std::fclose(f);
        if (got != buf.size())
            throw integrity_error("archive payload truncated: " + rel);
        for (std::size_t i = 0; i < buf.size(); ++i) t[i] = double(buf[i]);
        return t;
    }
};

// in-memory record used when building an archive
struct SliceData {
    SliceRecord record;
    std::vector<float> image; // H*W row-major
    std::vector<float> mask;
};

namespace detail {

inline std::string payload_name(const SliceRecord& r, const char* channel) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "_z%04d_%s.f32", r.z_index, channel);
    return "payloads/" + r.subject_id + buf;
}

inline void write_f32(const std::string& path, const std::vector<float>& data) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw io_error("cannot open payload for writing: " + path);
    if (std::fwrite(data.data(), sizeof(float), data.size(), f) != data.size()) {
        std::fclose(f);
        throw io_error("short write on payload: " + path);
    }
    std::fclose(f);
}

} // namespace detail

inline void write_archive(const std::string& dir, int height, int width, int n_z,
                          std::vector<SliceData> slices,
                          const std::map<std::string, std::string>& meta = {}) {
    namespace fs = std::filesystem;
    fs::create_directories(dir + "/payloads");

    std::set<std::pair<std::string, int>> seen;
    for (auto& s : slices) {
        if (!seen.insert({s.record.subject_id, s.record.z_index}).second)
            throw integrity_error("write_archive: duplicate (subject_id, z_index): " +
                                  s.record.subject_id + "/" + std::to_string(s.record.z_index));
        if (int(s.image.size()) != height * width || int(s.mask.size()) != height * width)
            throw shape_error("write_archive: payload size mismatch for " + s.record.subject_id);
        s.record.image_file = detail::payload_name(s.record, "image");
        s.record.mask_file = detail::payload_name(s.record, "mask");
        detail::write_f32(dir + "/" + s.record.image_file, s.image);
        detail::write_f32(dir + "/" + s.record.mask_file, s.mask);
    }

    // manifest last, via temp + rename, so a complete manifest implies a
    // complete archive
    const std::string tmp = dir + "/manifest.txt.tmp";
    {
        std::ofstream out(tmp);
        if (!out) throw io_error("cannot open manifest for writing: " + tmp);
        out << "jointdiff-archive v1\n";
        out << "height " << height << "\n";
        out << "width " << width << "\n";
        out << "n_z " << n_z << "\n";
        for (const auto& [k, v] : meta) out << "meta " << k << "=" << v << "\n";
        for (const auto& s : slices) {
            const auto& r = s.record;
            out << "record subject=" << r.subject_id << " z_index=" << r.z_index
                << " z_total=" << r.z_total << " z_bin=" << r.z_bin
                << " pathology=" << r.pathology << " image=" << r.image_file
                << " mask=" << r.mask_file << "\n";
        }
    }
    fs::rename(tmp, dir + "/manifest.txt");
}

inline SliceArchive read_archive(const std::string& dir) {
    namespace fs = std::filesystem;
    const std::string manifest = dir + "/manifest.txt";
    std::ifstream in(manifest);
    if (!in) throw integrity_error("archive manifest not found: " + manifest);

    SliceArchive ar;
    ar.dir = dir;
    std::string line;
    int line_no = 0;

    auto fail = [&](const std::string& what) -> Error {
        return parse_error("manifest " + manifest + ":" + std::to_string(line_no) + ": " + what);
    };

    if (!std::getline(in, line)) throw fail("empty manifest");
    ++line_no;
    if (line != "jointdiff-archive v1") {
        if (line.rfind("jointdiff-archive", 0) == 0)
            throw version_error("unknown archive version: " + line);
        throw fail("missing archive header");
    }

    std::set<std::pair<std::string, int>> seen;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string tag;
        ss >> tag;
        if (tag == "height" || tag == "width" || tag == "n_z") {
            int v = 0;
            if (!(ss >> v) || v < 1) throw fail("invalid value for " + tag);
            (tag == "height" ? ar.height : tag == "width" ? ar.width : ar.n_z) = v;
        } else if (tag == "meta") {
            std::string kv;
            std::getline(ss, kv);
            const auto eq = kv.find('=');
            if (eq == std::string::npos) throw fail("meta entry without '='");
            std::string key = kv.substr(0, eq);
            key.erase(0, key.find_first_not_of(' '));
            ar.meta[key] = kv.substr(eq + 1);
        } else if (tag == "record") {
            SliceRecord r;
            std::string field;
            bool has[7] = {};
            while (ss >> field) {
                const auto eq = field.find('=');
                if (eq == std::string::npos) throw fail("record field without '=': " + field);
                const std::string key = field.substr(0, eq);
                const std::string val = field.substr(eq + 1);
                try {
                    if (key == "subject") { r.subject_id = val; has[0] = true; }
                    else if (key == "z_index") { r.z_index = std::stoi(val); has[1] = true; }
                    else if (key == "z_total") { r.z_total = std::stoi(val); has[2] = true; }
                    else if (key == "z_bin") { r.z_bin = std::stoi(val); has[3] = true; }
                    else if (key == "pathology") { r.pathology = std::stoi(val); has[4] = true; }
                    else if (key == "image") { r.image_file = val; has[5] = true; }
                    else if (key == "mask") { r.mask_file = val; has[6] = true; }
                    else throw fail("unknown record field: " + key);
                } catch (const std::invalid_argument&) {
                    throw fail("non-numeric value in field " + key);
                }
            }
            for (int i = 0; i < 7; ++i)
                if (!has[i]) throw fail("record missing a required field");
            if (r.pathology != 0 && r.pathology != 1) throw fail("pathology must be 0 or 1");
            if (!seen.insert({r.subject_id, r.z_index}).second)
                throw fail("duplicate (subject_id, z_index): " + r.subject_id + "/" +
                           std::to_string(r.z_index));
            ar.records.push_back(std::move(r));
        } else {
            throw fail("unknown manifest tag: " + tag);
        }
    }
    if (ar.height < 1 || ar.width < 1) throw parse_error("manifest missing height/width: " + manifest);

    // structural integrity: every payload resolves with the declared size
    const std::size_t want = std::size_t(ar.height) * ar.width * sizeof(float);
    for (const auto& r : ar.records) {
        for (const std::string* rel : {&r.image_file, &r.mask_file}) {
            std::error_code ec;
            const auto sz = fs::file_size(dir + "/" + *rel, ec);
            if (ec) throw integrity_error("archive payload missing: " + *rel);
            if (sz != want)
                throw integrity_error("archive payload size mismatch for record " + r.subject_id +
                                      "/z" + std::to_string(r.z_index) + ": " + *rel);
        }
    }
    return ar;
}

// ---------------------------------------------------------------------------
// subject-wise split

struct SubjectSplit {
    std::vector<std::size_t> train; // record indices
    std::vector<std::size_t> val;
    std::set<std::string> train_subjects;
    std::set<std::string> val_subjects;
};

inline SubjectSplit subject_split(const std::vector<SliceRecord>& records, double val_fraction,
                                  std::uint64_t seed) {
    std::set<std::string> subject_set;
    for (const auto& r : records) subject_set.insert(r.subject_id);
    if (subject_set.size() < 2)
        throw config_error("subject_split: need >= 2 subjects, have " +
                           std::to_string(subject_set.size()));
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
        throw config_error("subject_split: val_fraction must be in (0, 1)");

    std::vector<std::string> subjects(subject_set.begin(), subject_set.end());
    Rng rng(mix_seed(seed, 0x5917u));
    for (std::size_t i = subjects.size(); i > 1; --i)
        std::swap(subjects[i - 1], subjects[std::size_t(rng.uniform_int(0, std::int64_t(i) - 1))]);

    std::size_t n_val = std::size_t(std::llround(val_fraction * double(subjects.size())));
    n_val = std::clamp<std::size_t>(n_val, 1, subjects.size() - 1);

    SubjectSplit split;
    for (std::size_t i = 0; i < subjects.size(); ++i)
        (i < n_val ? split.val_subjects : split.train_subjects).insert(subjects[i]);
    for (std::size_t i = 0; i < records.size(); ++i)
        (split.val_subjects.count(records[i].subject_id) ? split.val : split.train).push_back(i);

    // leakage check runs on every call, not only in tests
    for (const auto& s : split.val_subjects)
        if (split.train_subjects.count(s))
            throw numeric_error("subject_split: leakage detected for subject " + s);
    return split;
}

// ---------------------------------------------------------------------------
// synthetic toy dataset

struct ToyConfig {
    int n_subjects = 24;
    int slices_per_subject = 8;
    int h = 32;
    int w = 32;
    double lesion_prob = 0.5; // probability a subject carries lesions
    int n_z = 30;
    std::uint64_t seed = 1;
};

// intensity levels of the generated slices; the lesion shift is large enough
// that every lesion pixel outshines every non-lesion brain pixel
inline constexpr double kToyBackground = -0.9;
inline constexpr double kToyTextureAmp = 0.30;
inline constexpr double kToyLesionShift = 0.80;

// threshold separating lesion intensities from brain texture in toy images
inline constexpr double kToyHyperThreshold = 0.4;

inline std::vector<SliceData> generate_toy_slices(const ToyConfig& cfg) {
    if (cfg.n_subjects < 2 || cfg.slices_per_subject < 1 || cfg.h < 16 || cfg.w < 16)
        throw config_error("generate_toy_slices: invalid config");
    Rng root(cfg.seed);

    std::vector<SliceData> out;
    for (int si = 0; si < cfg.n_subjects; ++si) {
        Rng rng = root.fork(std::uint64_t(si) + 1);
        bool has_lesion = rng.uniform01() < cfg.lesion_prob;
        // both classes must exist for oversampling and the split to work
        if (si == 0) has_lesion = true;
        if (si == 1) has_lesion = false;

        char name[16];
        std::snprintf(name, sizeof(name), "t%04d", si);

        // per-subject anatomy and texture parameters
        const double rx_frac = rng.uniform(0.30, 0.38);
        const double cx = cfg.w / 2.0 + rng.uniform(-1.5, 1.5);
        const double cy = cfg.h / 2.0 + rng.uniform(-1.5, 1.5);
        const double tex_fy = rng.uniform(1.5, 3.5), tex_fx = rng.uniform(1.5, 3.5);
        const double tex_py = rng.uniform(0.0, 2.0 * M_PI), tex_px = rng.uniform(0.0, 2.0 * M_PI);

        std::vector<int> lesion_slices;
        if (has_lesion) {
            for (int j = 0; j < cfg.slices_per_subject; ++j)
                if (rng.uniform01() < 0.8) lesion_slices.push_back(j);
            if (lesion_slices.empty())
                lesion_slices.push_back(int(rng.uniform_int(0, cfg.slices_per_subject - 1)));
        }

        for (int j = 0; j < cfg.slices_per_subject; ++j) {
            SliceData sd;
            sd.record.subject_id = name;
            sd.record.z_index = j;
            sd.record.z_total = cfg.slices_per_subject;
            sd.record.z_bin = compute_z_bin(j, cfg.slices_per_subject, cfg.n_z);
            sd.image.assign(std::size_t(cfg.h) * cfg.w, float(kToyBackground));
            sd.mask.assign(std::size_t(cfg.h) * cfg.w, -1.0f);

            // brain vertical extent follows the axial position, so z is
            // learnable from image content
            const double z_frac = (j + 0.5) / double(cfg.slices_per_subject);
            const double ry = std::min((0.10 + 0.30 * std::sin(M_PI * z_frac)) * cfg.h,
                                       cfg.h / 2.0 - 2.0);
            const double rx = rx_frac * cfg.w;

            auto inside_brain = [&](int y, int x) {
                const double dy = (y - cy) / ry, dx = (x - cx) / rx;
                return dy * dy + dx * dx <= 1.0;
            };
            for (int y = 0; y < cfg.h; ++y)
                for (int x = 0; x < cfg.w; ++x)
                    if (inside_brain(y, x)) {
                        const double tex = kToyTextureAmp *
                                           std::sin(tex_fy * M_PI * y / cfg.h + tex_py) *
                                           std::sin(tex_fx * M_PI * x / cfg.w + tex_px);
                        sd.image[std::size_t(y) * cfg.w + x] = float(tex);
                    }

            const bool lesion_here =
                std::find(lesion_slices.begin(), lesion_slices.end(), j) != lesion_slices.end();
            if (lesion_here) {
                // hyperintense ellipse fully inside the brain, >= 5 px
                for (int attempt = 0; attempt < 64; ++attempt) {
                    const double ang = rng.uniform(0.0, 2.0 * M_PI);
                    const double rad = rng.uniform(0.0, 0.55);
                    const double ly = cy + rad * ry * std::sin(ang);
                    const double lx = cx + rad * rx * std::cos(ang);
                    const double lry = rng.uniform(2.2, 5.0);
                    const double lrx = rng.uniform(2.2, 5.0);
                    std::vector<std::size_t> hit;
                    for (int y = 0; y < cfg.h; ++y)
                        for (int x = 0; x < cfg.w; ++x) {
                            const double dy = (y - ly) / lry, dx = (x - lx) / lrx;
                            if (dy * dy + dx * dx <= 1.0 && inside_brain(y, x))
                                hit.push_back(std::size_t(y) * cfg.w + x);
                        }
                    if (hit.size() < 5) continue;
                    for (std::size_t idx : hit) {
                        sd.mask[idx] = 1.0f;
                        sd.image[idx] = float(std::min(1.0, double(sd.image[idx]) + kToyLesionShift));
                    }
                    break;
                }
            }

            sd.record.pathology =
                std::any_of(sd.mask.begin(), sd.mask.end(), [](float v) { return v > 0.0f; }) ? 1 : 0;
            out.push_back(std::move(sd));
        }
    }
    return out;
}

inline void generate_toy_dataset(const ToyConfig& cfg, const std::string& dir) {
    auto slices = generate_toy_slices(cfg);
    std::map<std::string, std::string> meta{
        {"source", "toy"},
        {"seed", std::to_string(cfg.seed)},
        {"lesion_prob", std::to_string(cfg.lesion_prob)}};
    write_archive(dir, cfg.h, cfg.w, cfg.n_z, std::move(slices), meta);
}

} // namespace jointdiff

#endif // JOINTDIFF_DATA_HPP
