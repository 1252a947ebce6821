#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "wsloc/evaluation.hpp"
#include "wsloc/localization.hpp"
#include "wsloc/pgm.hpp"
#include "wsloc/tensor.hpp"

namespace wsloc {

/// Two blob classes on a noisy background: class 0 renders filled discs,
/// class 1 renders annuli. Image-level labels drive training; the tight blob
/// boxes are ground truth for evaluation only.
struct SynthConfig {
    std::uint64_t seed = 0;
    int n_images = 100;
    int image_size = 64;
    int num_classes = 2;
    int radius_min = 4;
    int radius_max = 12;
    double blob_intensity = 0.6;
    double noise_std = 0.15;
    double positive_rate = 0.5;
    int min_blobs = 1;
    int max_blobs = 3;
};

struct SynthSample {
    std::string image_id;
    Tensor image;  // (H, W), values in [0, 1]
    std::vector<int> labels;
    std::vector<Box> gt_boxes;
};

namespace detail {

inline void render_blob(Tensor& image, int cx, int cy, int radius, int class_id,
                        double intensity) {
    const double r2 = static_cast<double>(radius) * radius;
    // Annulus inner radius for ring blobs; discs fill the whole circle.
    const double inner = 0.5 * radius;
    const double inner2 = inner * inner;
    for (int dy = -radius; dy <= radius; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
            const double d2 = static_cast<double>(dx) * dx + static_cast<double>(dy) * dy;
            if (d2 > r2) continue;
            if (class_id == 1 && d2 < inner2) continue;
            image(static_cast<std::size_t>(cy + dy), static_cast<std::size_t>(cx + dx)) +=
                intensity;
        }
    }
}

}  // namespace detail

inline std::string synth_image_id(int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "img_%05d", index);
    return buf;
}

/// Deterministic given the seed; every sample draws from its own derived
/// stream, so per-sample content does not depend on generation order.
/// Pixel values are quantized to 255ths so the in-memory dataset and its PGM
/// round trip agree exactly.
inline std::vector<SynthSample> generate_dataset(const SynthConfig& cfg) {
    if (cfg.n_images < 0) throw std::invalid_argument("n_images must be nonnegative");
    if (cfg.image_size < 1) throw std::invalid_argument("image_size must be positive");
    if (cfg.radius_min < 1 || cfg.radius_max < cfg.radius_min)
        throw std::invalid_argument("invalid radius range");
    if (cfg.radius_max >= cfg.image_size / 2)
        throw std::invalid_argument("blob radius does not fit inside the image");
    if (cfg.positive_rate < 0.0 || cfg.positive_rate > 1.0)
        throw std::invalid_argument("positive rate must lie in [0, 1]");
    if (cfg.min_blobs < 1 || cfg.max_blobs < cfg.min_blobs)
        throw std::invalid_argument("invalid blob count range");

    const std::size_t size = static_cast<std::size_t>(cfg.image_size);
    std::vector<SynthSample> samples;
    samples.reserve(static_cast<std::size_t>(cfg.n_images));
    for (int idx = 0; idx < cfg.n_images; ++idx) {
        Rng rng = Rng::derive(cfg.seed, static_cast<std::uint64_t>(idx) + 1);
        SynthSample s;
        s.image_id = synth_image_id(idx);
        s.image = Tensor({size, size});
        s.labels.assign(static_cast<std::size_t>(cfg.num_classes), 0);

        for (double& v : s.image.data) v = rng.normal(0.0, cfg.noise_std);

        for (int cls = 0; cls < cfg.num_classes; ++cls) {
            if (rng.uniform() >= cfg.positive_rate) continue;
            s.labels[static_cast<std::size_t>(cls)] = 1;
            const int blobs =
                cfg.min_blobs +
                static_cast<int>(rng.uniform_int(
                    static_cast<std::uint64_t>(cfg.max_blobs - cfg.min_blobs + 1)));
            for (int n = 0; n < blobs; ++n) {
                const int radius =
                    cfg.radius_min +
                    static_cast<int>(rng.uniform_int(
                        static_cast<std::uint64_t>(cfg.radius_max - cfg.radius_min + 1)));
                const int lo = radius, hi = cfg.image_size - 1 - radius;
                const int cx = lo + static_cast<int>(rng.uniform_int(
                                        static_cast<std::uint64_t>(hi - lo + 1)));
                const int cy = lo + static_cast<int>(rng.uniform_int(
                                        static_cast<std::uint64_t>(hi - lo + 1)));
                detail::render_blob(s.image, cx, cy, radius, cls, cfg.blob_intensity);
                Box b;
                b.x = cx - radius;
                b.y = cy - radius;
                b.w = 2 * radius + 1;
                b.h = 2 * radius + 1;
                b.class_id = cls;
                s.gt_boxes.push_back(b);
            }
        }

        for (double& v : s.image.data) {
            v = std::clamp(v, 0.0, 1.0);
            v = std::lround(255.0 * v) / 255.0;
        }
        samples.push_back(std::move(s));
    }
    return samples;
}

// ---------------------------------------------------------------------------
// On-disk layout: images/{image_id}.pgm, labels.csv, gt_boxes.csv and a
// config.json echoing every generator field.
// ---------------------------------------------------------------------------

inline nlohmann::json synth_config_to_json(const SynthConfig& cfg) {
    return nlohmann::json{{"seed", cfg.seed},
                          {"n_images", cfg.n_images},
                          {"image_size", cfg.image_size},
                          {"num_classes", cfg.num_classes},
                          {"radius_min", cfg.radius_min},
                          {"radius_max", cfg.radius_max},
                          {"blob_intensity", cfg.blob_intensity},
                          {"noise_std", cfg.noise_std},
                          {"positive_rate", cfg.positive_rate},
                          {"min_blobs", cfg.min_blobs},
                          {"max_blobs", cfg.max_blobs}};
}

inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
    SynthConfig cfg;
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.n_images = j.at("n_images").get<int>();
    cfg.image_size = j.at("image_size").get<int>();
    cfg.num_classes = j.at("num_classes").get<int>();
    cfg.radius_min = j.at("radius_min").get<int>();
    cfg.radius_max = j.at("radius_max").get<int>();
    cfg.blob_intensity = j.at("blob_intensity").get<double>();
    cfg.noise_std = j.at("noise_std").get<double>();
    cfg.positive_rate = j.at("positive_rate").get<double>();
    cfg.min_blobs = j.at("min_blobs").get<int>();
    cfg.max_blobs = j.at("max_blobs").get<int>();
    return cfg;
}

inline void write_dataset(const std::filesystem::path& dir, const SynthConfig& cfg,
                          const std::vector<SynthSample>& samples) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "images");

    std::map<std::string, std::vector<int>> labels;
    std::vector<BoxRecord> boxes;
    for (const SynthSample& s : samples) {
        write_pgm(dir / "images" / (s.image_id + ".pgm"), gray8_from_map(s.image));
        labels[s.image_id] = s.labels;
        for (const Box& b : s.gt_boxes) boxes.push_back({s.image_id, b});
    }
    write_labels_csv(dir / "labels.csv", labels, static_cast<std::size_t>(cfg.num_classes));
    write_boxes_csv(dir / "gt_boxes.csv", boxes, /*with_score=*/false);

    std::ofstream os(dir / "config.json", std::ios::binary);
    if (!os) throw std::runtime_error("cannot write config.json");
    os << synth_config_to_json(cfg).dump(2) << "\n";
}

struct LoadedDataset {
    SynthConfig config;
    std::vector<SynthSample> samples;
};

inline LoadedDataset load_dataset(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    std::ifstream cf(dir / "config.json");
    if (!cf) throw std::runtime_error("cannot open " + (dir / "config.json").string());
    nlohmann::json j;
    cf >> j;

    LoadedDataset out;
    out.config = synth_config_from_json(j);

    auto labels = read_labels_csv(dir / "labels.csv");
    auto boxes = read_boxes_csv(dir / "gt_boxes.csv");
    std::map<std::string, std::vector<Box>> boxes_by_image;
    for (const auto& r : boxes) boxes_by_image[r.image_id].push_back(r.box);

    for (const auto& [image_id, label_row] : labels) {
        SynthSample s;
        s.image_id = image_id;
        s.image = map_from_gray8(read_pgm(dir / "images" / (image_id + ".pgm")));
        s.labels = label_row;
        auto it = boxes_by_image.find(image_id);
        if (it != boxes_by_image.end()) s.gt_boxes = it->second;
        out.samples.push_back(std::move(s));
    }
    return out;
}

/// Ground-truth view of a sample list, for the evaluation module.
inline AnnotationSet annotations_from_samples(const std::vector<SynthSample>& samples) {
    AnnotationSet gt;
    for (const SynthSample& s : samples) gt.labels[s.image_id] = s.labels;
    for (const SynthSample& s : samples)
        for (const Box& b : s.gt_boxes) gt.add_box(s.image_id, b);
    return gt;
}

}  // namespace wsloc
