#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "wsloc/tensor.hpp"

namespace wsloc {

struct BinaryMask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> values;

    std::uint8_t at(std::size_t i, std::size_t j) const { return values[i * width + j]; }
    std::uint8_t& at(std::size_t i, std::size_t j) { return values[i * width + j]; }
};

/// Axis-aligned rectangle covering pixels [x, x+w) x [y, y+h).
struct Box {
    int x = 0;
    int y = 0;
    int w = 0;
    int h = 0;
    int class_id = 0;
    double score = 1.0;

    long long area() const { return static_cast<long long>(w) * h; }
};

inline BinaryMask threshold_probability_map(const Tensor& p, double tau = 0.9) {
    if (p.rank() != 2) throw std::invalid_argument("expected a (H, W) map");
    if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("threshold must lie in (0, 1)");
    BinaryMask mask;
    mask.height = p.shape[0];
    mask.width = p.shape[1];
    mask.values.resize(p.numel());
    for (std::size_t i = 0; i < p.numel(); ++i) mask.values[i] = p.data[i] >= tau ? 1 : 0;
    return mask;
}

struct CamNormalization {
    std::vector<int> values;  // per pixel, in [0, 255]
    BinaryMask mask;
};

/// Per-image min/max rescaling of a score map to [0, 255] (round half away
/// from zero) followed by a fixed integer threshold. A constant map goes to
/// all zeros, which yields no regions.
inline CamNormalization normalize_cam_255(const Tensor& s, int threshold = 180) {
    if (s.rank() != 2) throw std::invalid_argument("expected a (H, W) map");
    CamNormalization out;
    out.values.assign(s.numel(), 0);
    out.mask.height = s.shape[0];
    out.mask.width = s.shape[1];
    out.mask.values.assign(s.numel(), 0);

    double lo = s.data[0], hi = s.data[0];
    for (double v : s.data) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (hi > lo) {
        for (std::size_t i = 0; i < s.numel(); ++i) {
            out.values[i] =
                static_cast<int>(std::lround(255.0 * (s.data[i] - lo) / (hi - lo)));
            out.mask.values[i] = out.values[i] >= threshold ? 1 : 0;
        }
    }
    return out;
}

/// Maximal 8-connected components of the 1-pixels, each as a raster-sorted
/// list of flat pixel indices. Components are ordered by their first pixel.
inline std::vector<std::vector<std::size_t>> connected_components(const BinaryMask& mask) {
    const std::size_t n = mask.values.size();
    // Union-find over pixel indices; flood fill lives in the tests as the
    // independent reference.
    std::vector<std::size_t> parent(n);
    for (std::size_t i = 0; i < n; ++i) parent[i] = i;
    auto find = [&parent](std::size_t i) {
        while (parent[i] != i) {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        return i;
    };
    auto unite = [&parent, &find](std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[std::max(a, b)] = std::min(a, b);
    };

    const int width = static_cast<int>(mask.width);
    const int height = static_cast<int>(mask.height);
    for (int i = 0; i < height; ++i) {
        for (int j = 0; j < width; ++j) {
            if (!mask.at(i, j)) continue;
            const std::size_t idx = static_cast<std::size_t>(i) * mask.width + j;
            // Predecessor neighbours under 8-connectivity: W, NW, N, NE.
            const int di[4] = {0, -1, -1, -1};
            const int dj[4] = {-1, -1, 0, 1};
            for (int k = 0; k < 4; ++k) {
                const int r = i + di[k], c = j + dj[k];
                if (r < 0 || c < 0 || c >= width) continue;
                if (mask.at(r, c)) unite(idx, static_cast<std::size_t>(r) * mask.width + c);
            }
        }
    }

    std::vector<std::vector<std::size_t>> components;
    std::vector<std::size_t> slot(n, SIZE_MAX);
    for (std::size_t i = 0; i < n; ++i) {
        if (!mask.values[i]) continue;
        const std::size_t root = find(i);
        if (slot[root] == SIZE_MAX) {
            slot[root] = components.size();
            components.emplace_back();
        }
        components[slot[root]].push_back(i);
    }
    return components;
}

/// One tight box per component with at least min_area pixels. Box score is
/// the max probability inside the component when a probability map is given.
/// Boxes come out sorted by descending score, ties in raster order.
inline std::vector<Box> boxes_from_mask(const BinaryMask& mask, const Tensor* prob,
                                        int class_id, int min_area = 1) {
    if (prob && (prob->rank() != 2 || prob->shape[0] != mask.height ||
                 prob->shape[1] != mask.width))
        throw std::invalid_argument("probability map shape does not match mask");

    std::vector<Box> boxes;
    for (const auto& comp : connected_components(mask)) {
        if (comp.size() < static_cast<std::size_t>(min_area)) continue;
        std::size_t min_r = SIZE_MAX, max_r = 0, min_c = SIZE_MAX, max_c = 0;
        double score = prob ? 0.0 : 1.0;
        for (std::size_t idx : comp) {
            const std::size_t r = idx / mask.width, c = idx % mask.width;
            min_r = std::min(min_r, r);
            max_r = std::max(max_r, r);
            min_c = std::min(min_c, c);
            max_c = std::max(max_c, c);
            if (prob) score = std::max(score, prob->data[idx]);
        }
        Box b;
        b.x = static_cast<int>(min_c);
        b.y = static_cast<int>(min_r);
        b.w = static_cast<int>(max_c - min_c + 1);
        b.h = static_cast<int>(max_r - min_r + 1);
        b.class_id = class_id;
        b.score = score;
        boxes.push_back(b);
    }
    std::stable_sort(boxes.begin(), boxes.end(),
                     [](const Box& a, const Box& b) { return a.score > b.score; });
    return boxes;
}

/// Nearest-neighbour upsampling; exact block replication for integer factors.
inline Tensor upsample_nearest(const Tensor& map, std::size_t out_h, std::size_t out_w) {
    if (map.rank() != 2) throw std::invalid_argument("expected a (H, W) map");
    Tensor out({out_h, out_w});
    for (std::size_t i = 0; i < out_h; ++i) {
        const std::size_t src_i = i * map.shape[0] / out_h;
        for (std::size_t j = 0; j < out_w; ++j) {
            const std::size_t src_j = j * map.shape[1] / out_w;
            out(i, j) = map(src_i, src_j);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Box CSV: header `image_id,class_id,x,y,w,h,score`, one row per box, LF line
// endings. Ground-truth files use the same columns without `score`.
// ---------------------------------------------------------------------------

struct BoxRecord {
    std::string image_id;
    Box box;
};

namespace detail {

inline std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc()) throw std::runtime_error("double formatting failed");
    return std::string(buf, ptr);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    fields.push_back(cur);
    return fields;
}

}  // namespace detail

inline void write_boxes_csv(const std::filesystem::path& path,
                            const std::vector<BoxRecord>& records, bool with_score = true) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
    os << "image_id,class_id,x,y,w,h" << (with_score ? ",score" : "") << "\n";
    for (const auto& r : records) {
        os << r.image_id << "," << r.box.class_id << "," << r.box.x << "," << r.box.y << ","
           << r.box.w << "," << r.box.h;
        if (with_score) os << "," << detail::format_double(r.box.score);
        os << "\n";
    }
}

inline std::vector<BoxRecord> read_boxes_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::string header;
    std::getline(is, header);
    auto head = detail::split_csv_line(header);
    const bool with_score = head.size() == 7 && head[6] == "score";
    if (!(with_score || head.size() == 6) || head[0] != "image_id")
        throw std::runtime_error(path.string() + ": unexpected box CSV header");

    std::vector<BoxRecord> records;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto f = detail::split_csv_line(line);
        if (f.size() != head.size())
            throw std::runtime_error(path.string() + ": malformed box CSV row");
        BoxRecord r;
        r.image_id = f[0];
        r.box.class_id = std::stoi(f[1]);
        r.box.x = std::stoi(f[2]);
        r.box.y = std::stoi(f[3]);
        r.box.w = std::stoi(f[4]);
        r.box.h = std::stoi(f[5]);
        if (with_score) {
            double s = 0.0;
            auto res = std::from_chars(f[6].data(), f[6].data() + f[6].size(), s);
            if (res.ec != std::errc())
                throw std::runtime_error(path.string() + ": bad score field");
            r.box.score = s;
        }
        if (r.box.w < 1 || r.box.h < 1)
            throw std::runtime_error(path.string() + ": box extents must be positive");
        records.push_back(std::move(r));
    }
    return records;
}

}  // namespace wsloc
