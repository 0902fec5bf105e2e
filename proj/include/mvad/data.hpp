// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mvad/core.hpp"
#include "mvad/png_io.hpp"

namespace mvad {

enum class Split { train, test };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "test") return Split::test;
    throw ConfigError("unknown split '" + s + "' (expected train|test)");
}

struct VideoClip {
    std::string clip_id;
    std::vector<Frame> frames;
    std::optional<std::vector<int>> labels;

    int size() const { return static_cast<int>(frames.size()); }
    bool operator==(const VideoClip&) const = default;
};

struct VideoDataset {
    std::vector<VideoClip> videos;
    Split split = Split::train;
    int frame_height = 0;
    int frame_width = 0;
    int channels = 0;

    std::size_t num_frames() const {
        std::size_t n = 0;
        for (const auto& v : videos) n += v.frames.size();
        return n;
    }

    /// Copy with every label sequence removed.
    VideoDataset without_labels() const {
        VideoDataset out = *this;
        for (auto& v : out.videos) v.labels.reset();
        return out;
    }

    /// Throws IngestionError when a dataset invariant does not hold.
    void validate() const {
        if (channels != 1 && channels != 3) throw IngestionError("channels must be 1 or 3");
        for (const auto& v : videos) {
            for (const auto& f : v.frames) {
                if (f.height != frame_height || f.width != frame_width || f.channels != channels)
                    throw IngestionError("clip '" + v.clip_id + "': frame shape " + shape_string(f) +
                                         " differs from dataset shape " +
                                         shape_string(frame_height, frame_width, channels));
            }
            if (v.labels) {
                if (v.labels->size() != v.frames.size())
                    throw IngestionError("clip '" + v.clip_id + "': " + std::to_string(v.labels->size()) +
                                         " labels for " + std::to_string(v.frames.size()) + " frames");
                for (int l : *v.labels)
                    if (l != 0 && l != 1) throw IngestionError("clip '" + v.clip_id + "': label not in {0,1}");
            }
        }
    }

    bool operator==(const VideoDataset&) const = default;
};

/// T consecutive input frames plus the frame that follows them. Views into
/// the owning dataset, which must outlive the window.
struct FrameWindow {
    std::span<const Frame> inputs;
    const Frame* target = nullptr;
    std::string clip_id;
    int clip_index = 0;
    int target_index = 0;

    int num_inputs() const { return static_cast<int>(inputs.size()); }

    /// Materializes the channel-concatenated H x W x (T*C) input tensor.
    Frame stacked_inputs() const {
        const Frame& f0 = inputs.front();
        const int t_count = num_inputs();
        Frame out(f0.height, f0.width, f0.channels * t_count);
        for (int y = 0; y < f0.height; ++y)
            for (int x = 0; x < f0.width; ++x)
                for (int t = 0; t < t_count; ++t)
                    for (int c = 0; c < f0.channels; ++c)
                        out.at(y, x, t * f0.channels + c) = inputs[t].at(y, x, c);
        return out;
    }
};

struct WindowSet {
    std::vector<FrameWindow> windows;
    std::vector<std::string> warnings;
};

/// Stride-1 windows over one clip; targets run T..n-1.
inline std::vector<FrameWindow> clip_windows(const VideoClip& clip, int T, int clip_index = 0) {
    if (T < 1) throw ConfigError("T must be >= 1");
    std::vector<FrameWindow> out;
    const int n = clip.size();
    if (n <= T) return out;
    std::span<const Frame> frames(clip.frames);
    out.reserve(static_cast<std::size_t>(n - T));
    for (int t = T; t < n; ++t)
        out.push_back(FrameWindow{frames.subspan(static_cast<std::size_t>(t - T), static_cast<std::size_t>(T)),
                                  &clip.frames[static_cast<std::size_t>(t)], clip.clip_id, clip_index, t});
    return out;
}

/// Windows of every clip in order; a clip of n frames yields max(0, n - T).
inline WindowSet sample_windows(const VideoDataset& dataset, int T) {
    if (T < 1) throw ConfigError("T must be >= 1");
    WindowSet out;
    for (std::size_t ci = 0; ci < dataset.videos.size(); ++ci) {
        const VideoClip& clip = dataset.videos[ci];
        if (clip.size() <= T) {
            out.warnings.push_back("clip '" + clip.clip_id + "' has " + std::to_string(clip.size()) +
                                   " frames, needs more than T=" + std::to_string(T) + "; skipped");
            continue;
        }
        auto w = clip_windows(clip, T, static_cast<int>(ci));
        out.windows.insert(out.windows.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
    }
    return out;
}

// ---------------------------------------------------------------------------
// On-disk layout: <root>/<split>/<clip_id>/######.png, test labels in
// <root>/<split>/<clip_id>/labels.txt (one 0/1 per line).

inline std::string frame_filename(int index) {
    std::ostringstream os;
    os << std::setw(6) << std::setfill('0') << index << ".png";
    return os.str();
}

namespace detail {

inline bool is_frame_file(const std::filesystem::path& p) {
    const std::string name = p.filename().string();
    if (name.size() != 10 || p.extension() != ".png") return false;
    return std::all_of(name.begin(), name.begin() + 6, [](char c) { return c >= '0' && c <= '9'; });
}

inline std::vector<int> read_labels(const std::filesystem::path& path, const std::string& clip_id) {
    std::ifstream in(path);
    if (!in) throw IngestionError("clip '" + clip_id + "': missing label file " + path.string());
    std::vector<int> labels;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line == "0")
            labels.push_back(0);
        else if (line == "1")
            labels.push_back(1);
        else
            throw IngestionError("clip '" + clip_id + "': bad label line '" + line + "'");
    }
    return labels;
}

}  // namespace detail

inline void check_patch_divisible(int height, int width, int patch_size) {
    if (patch_size <= 0) throw ConfigError("patch size must be positive");
    if (height <= 0 || width <= 0 || height % patch_size != 0 || width % patch_size != 0)
        throw ConfigError("frame size " + std::to_string(height) + "x" + std::to_string(width) +
                          " is not divisible by patch size " + std::to_string(patch_size));
}

/// Loads one split, resizing every frame to resize_to and scaling to [0,1].
inline VideoDataset load_dataset(const std::filesystem::path& root, Split split, std::pair<int, int> resize_to,
                                 int channels, int patch_size) {
    namespace fs = std::filesystem;
    check_patch_divisible(resize_to.first, resize_to.second, patch_size);
    if (channels != 1 && channels != 3) throw ConfigError("channels must be 1 or 3");
    const fs::path split_dir = root / to_string(split);
    if (!fs::is_directory(split_dir)) throw IngestionError("missing split directory " + split_dir.string());

    std::vector<fs::path> clip_dirs;
    for (const auto& e : fs::directory_iterator(split_dir))
        if (e.is_directory()) clip_dirs.push_back(e.path());
    std::sort(clip_dirs.begin(), clip_dirs.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename().string() < b.filename().string(); });

    VideoDataset ds;
    ds.split = split;
    ds.frame_height = resize_to.first;
    ds.frame_width = resize_to.second;
    ds.channels = channels;
    for (const auto& dir : clip_dirs) {
        VideoClip clip;
        clip.clip_id = dir.filename().string();
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(dir))
            if (e.is_regular_file() && detail::is_frame_file(e.path())) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        if (files.empty()) throw IngestionError("clip '" + clip.clip_id + "' has no frames");
        clip.frames.reserve(files.size());
        for (const auto& f : files) clip.frames.push_back(resize_bilinear(read_png(f, channels), resize_to.first, resize_to.second));
        if (split == Split::test) {
            auto labels = detail::read_labels(dir / "labels.txt", clip.clip_id);
            if (labels.size() != clip.frames.size())
                throw IngestionError("clip '" + clip.clip_id + "': " + std::to_string(labels.size()) + " labels for " +
                                     std::to_string(clip.frames.size()) + " frames");
            clip.labels = std::move(labels);
        }
        ds.videos.push_back(std::move(clip));
    }
    ds.validate();
    return ds;
}

/// Writes a dataset in the on-disk layout under <root>/<split>/.
inline void write_dataset(const VideoDataset& ds, const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    std::error_code split_ec;
    fs::create_directories(root / to_string(ds.split), split_ec);
    if (split_ec) throw IoError("cannot create " + (root / to_string(ds.split)).string() + ": " + split_ec.message());
    for (const auto& clip : ds.videos) {
        const fs::path dir = root / to_string(ds.split) / clip.clip_id;
        std::error_code ec;
        fs::create_directories(dir, ec);
        if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
        for (int i = 0; i < clip.size(); ++i) write_png(dir / frame_filename(i), clip.frames[static_cast<std::size_t>(i)]);
        if (clip.labels) {
            std::ofstream out(dir / "labels.txt", std::ios::binary);
            if (!out) throw IoError("cannot write labels for " + clip.clip_id);
            for (int l : *clip.labels) out << l << '\n';
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic moving-sprite video.

enum class AnomalyKind { fast_motion, odd_shape };

inline std::string to_string(AnomalyKind k) { return k == AnomalyKind::fast_motion ? "fast_motion" : "odd_shape"; }

inline AnomalyKind parse_anomaly_kind(const std::string& s) {
    if (s == "fast_motion") return AnomalyKind::fast_motion;
    if (s == "odd_shape") return AnomalyKind::odd_shape;
    throw ConfigError("unknown anomaly kind '" + s + "' (expected fast_motion|odd_shape)");
}

struct SyntheticSpec {
    int num_train_clips = 8;
    int num_test_clips = 8;
    int frames_per_clip = 24;
    int frame_height = 64;
    int frame_width = 64;
    int channels = 1;
    int sprites_per_clip = 2;
    double sprite_radius = 5.0;
    double sprite_speed_normal = 2.0;
    double anomaly_speed_factor = 4.0;
    AnomalyKind anomaly_kind = AnomalyKind::fast_motion;
    std::pair<int, int> anomaly_span{8, 16};
    std::uint64_t seed = 0;

    void validate() const {
        if (num_train_clips < 0 || num_test_clips < 0) throw ConfigError("clip counts must be >= 0");
        if (frames_per_clip < 1 || frames_per_clip > 999999) throw ConfigError("frames_per_clip out of range");
        if (frame_height < 8 || frame_width < 8) throw ConfigError("synthetic frames must be at least 8x8");
        if (channels != 1 && channels != 3) throw ConfigError("channels must be 1 or 3");
        if (sprites_per_clip < 1) throw ConfigError("sprites_per_clip must be >= 1");
        if (!(sprite_radius > 0) || 2 * sprite_radius >= std::min(frame_height, frame_width))
            throw ConfigError("sprite_radius must be positive and fit inside the frame");
        if (!(sprite_speed_normal > 0)) throw ConfigError("sprite_speed_normal must be positive");
        if (!(anomaly_speed_factor >= 3.0)) throw ConfigError("anomaly_speed_factor must be >= 3");
        const auto [s, e] = anomaly_span;
        if (s < 0 || e > frames_per_clip || s >= e)
            throw ConfigError("anomaly_span must satisfy 0 <= start < end <= frames_per_clip");
    }
};

inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
    j = nlohmann::json{{"num_train_clips", s.num_train_clips},
                       {"num_test_clips", s.num_test_clips},
                       {"frames_per_clip", s.frames_per_clip},
                       {"frame_height", s.frame_height},
                       {"frame_width", s.frame_width},
                       {"channels", s.channels},
                       {"sprites_per_clip", s.sprites_per_clip},
                       {"sprite_radius", s.sprite_radius},
                       {"sprite_speed_normal", s.sprite_speed_normal},
                       {"anomaly_speed_factor", s.anomaly_speed_factor},
                       {"anomaly_kind", to_string(s.anomaly_kind)},
                       {"anomaly_span", {s.anomaly_span.first, s.anomaly_span.second}},
                       {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, SyntheticSpec& s) {
    s.num_train_clips = j.at("num_train_clips").get<int>();
    s.num_test_clips = j.at("num_test_clips").get<int>();
    s.frames_per_clip = j.at("frames_per_clip").get<int>();
    s.frame_height = j.at("frame_height").get<int>();
    s.frame_width = j.at("frame_width").get<int>();
    s.channels = j.at("channels").get<int>();
    s.sprites_per_clip = j.at("sprites_per_clip").get<int>();
    s.sprite_radius = j.at("sprite_radius").get<double>();
    s.sprite_speed_normal = j.at("sprite_speed_normal").get<double>();
    s.anomaly_speed_factor = j.at("anomaly_speed_factor").get<double>();
    s.anomaly_kind = parse_anomaly_kind(j.at("anomaly_kind").get<std::string>());
    s.anomaly_span = {j.at("anomaly_span").at(0).get<int>(), j.at("anomaly_span").at(1).get<int>()};
    s.seed = j.at("seed").get<std::uint64_t>();
}

struct SyntheticDataset {
    VideoDataset train;
    VideoDataset test;
};

namespace detail {

constexpr std::uint32_t kTagBackground = 1;
constexpr std::uint32_t kTagClip = 2;

struct Sprite {
    double x, y, vx, vy;
};

// Smooth static texture shared by every clip of a dataset.
inline std::vector<float> make_background(const SyntheticSpec& spec) {
    std::mt19937_64 rng(derive_seed(spec.seed, kTagBackground, 0));
    constexpr double two_pi = 6.283185307179586;
    std::array<double, 3> freq{}, phase{};
    for (int k = 0; k < 3; ++k) {
        freq[static_cast<std::size_t>(k)] = (1.0 + 2.0 * uniform01(rng)) / 32.0;
        phase[static_cast<std::size_t>(k)] = uniform01(rng);
    }
    std::vector<float> bg(static_cast<std::size_t>(spec.frame_height) * spec.frame_width);
    for (int y = 0; y < spec.frame_height; ++y) {
        for (int x = 0; x < spec.frame_width; ++x) {
            const double v = 0.30 + 0.07 * std::sin(two_pi * (x * freq[0] + phase[0])) +
                             0.05 * std::sin(two_pi * (y * freq[1] + phase[1])) +
                             0.04 * std::sin(two_pi * ((x + y) * freq[2] + phase[2])) +
                             0.02 * (uniform01(rng) - 0.5);
            bg[static_cast<std::size_t>(y) * spec.frame_width + x] = static_cast<float>(v);
        }
    }
    return bg;
}

// Sub-pixel coverage test for the two sprite shapes. Normal sprites are discs;
// the odd shape is a plus sign of the same extent.
inline bool inside(bool odd, double dx, double dy, double r) {
    if (!odd) return dx * dx + dy * dy <= r * r;
    const double arm = 0.35 * r;
    return (std::abs(dx) <= r && std::abs(dy) <= arm) || (std::abs(dy) <= r && std::abs(dx) <= arm);
}

inline void render_sprite(std::vector<float>& gray, int h, int w, const Sprite& s, double r, bool odd) {
    constexpr int ss = 4;
    constexpr float ink = 0.92f;
    const int y0 = std::max(0, static_cast<int>(std::floor(s.y - r - 1)));
    const int y1 = std::min(h - 1, static_cast<int>(std::ceil(s.y + r + 1)));
    const int x0 = std::max(0, static_cast<int>(std::floor(s.x - r - 1)));
    const int x1 = std::min(w - 1, static_cast<int>(std::ceil(s.x + r + 1)));
    for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
            int hits = 0;
            for (int sy = 0; sy < ss; ++sy)
                for (int sx = 0; sx < ss; ++sx)
                    hits += inside(odd, x + (sx + 0.5) / ss - s.x, y + (sy + 0.5) / ss - s.y, r) ? 1 : 0;
            const float a = static_cast<float>(hits) / (ss * ss);
            float& px = gray[static_cast<std::size_t>(y) * w + x];
            px = px * (1.0f - a) + ink * a;
        }
    }
}

inline void advance(Sprite& s, double factor, double r, int h, int w) {
    s.x += s.vx * factor;
    s.y += s.vy * factor;
    // Reflect off the walls; the loop handles overshoots larger than the frame.
    for (int guard = 0; guard < 8; ++guard) {
        bool moved = false;
        if (s.x < r) { s.x = 2 * r - s.x; s.vx = -s.vx; moved = true; }
        if (s.x > w - r) { s.x = 2 * (w - r) - s.x; s.vx = -s.vx; moved = true; }
        if (s.y < r) { s.y = 2 * r - s.y; s.vy = -s.vy; moved = true; }
        if (s.y > h - r) { s.y = 2 * (h - r) - s.y; s.vy = -s.vy; moved = true; }
        if (!moved) break;
    }
}

inline VideoClip make_clip(const SyntheticSpec& spec, const std::vector<float>& bg, Split split, int index,
                           bool anomalous) {
    std::mt19937_64 rng(derive_seed(spec.seed, kTagClip, split == Split::train ? 0 : 1, static_cast<std::uint64_t>(index)));
    const int h = spec.frame_height, w = spec.frame_width;
    const double r = spec.sprite_radius;
    std::vector<Sprite> sprites;
    for (int k = 0; k < spec.sprites_per_clip; ++k) {
        Sprite s{};
        s.x = r + uniform01(rng) * (w - 2 * r);
        s.y = r + uniform01(rng) * (h - 2 * r);
        const double angle = 6.283185307179586 * uniform01(rng);
        s.vx = spec.sprite_speed_normal * std::cos(angle);
        s.vy = spec.sprite_speed_normal * std::sin(angle);
        sprites.push_back(s);
    }
    VideoClip clip;
    clip.clip_id = to_string(split) + "_" + [&] {
        std::ostringstream os;
        os << std::setw(3) << std::setfill('0') << index;
        return os.str();
    }();
    const auto [span_start, span_end] = spec.anomaly_span;
    std::vector<int> labels;
    for (int f = 0; f < spec.frames_per_clip; ++f) {
        const bool in_span = anomalous && f >= span_start && f < span_end;
        if (f > 0) {
            const double factor =
                (in_span && spec.anomaly_kind == AnomalyKind::fast_motion) ? spec.anomaly_speed_factor : 1.0;
            for (auto& s : sprites) advance(s, factor, r, h, w);
        }
        std::vector<float> gray = bg;
        const bool odd = in_span && spec.anomaly_kind == AnomalyKind::odd_shape;
        for (const auto& s : sprites) render_sprite(gray, h, w, s, r, odd);
        Frame frame(h, w, spec.channels);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < spec.channels; ++c) frame.at(y, x, c) = gray[static_cast<std::size_t>(y) * w + x];
        clip.frames.push_back(std::move(frame));
        labels.push_back(in_span ? 1 : 0);
    }
    if (split == Split::test) clip.labels = std::move(labels);
    return clip;
}

}  // namespace detail

/// Deterministic desk-scale dataset: normal-only train clips and a test split
/// whose odd-indexed clips carry an anomaly inside anomaly_span.
inline SyntheticDataset generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    const auto bg = detail::make_background(spec);
    SyntheticDataset out;
    for (VideoDataset* ds : {&out.train, &out.test}) {
        ds->frame_height = spec.frame_height;
        ds->frame_width = spec.frame_width;
        ds->channels = spec.channels;
    }
    out.train.split = Split::train;
    out.test.split = Split::test;
    for (int i = 0; i < spec.num_train_clips; ++i)
        out.train.videos.push_back(detail::make_clip(spec, bg, Split::train, i, false));
    for (int i = 0; i < spec.num_test_clips; ++i)
        out.test.videos.push_back(detail::make_clip(spec, bg, Split::test, i, i % 2 == 1));
    return out;
}

/// Writes both splits plus a spec.json echo under root.
inline void write_synthetic(const SyntheticSpec& spec, const SyntheticDataset& ds, const std::filesystem::path& root) {
    write_dataset(ds.train, root);
    write_dataset(ds.test, root);
    std::ofstream out(root / "spec.json", std::ios::binary);
    if (!out) throw IoError("cannot write " + (root / "spec.json").string());
    out << nlohmann::json(spec).dump(2) << '\n';
}

}  // namespace mvad
