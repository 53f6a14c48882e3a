#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "photodoodle/codec.hpp"
#include "photodoodle/errors.hpp"
#include "photodoodle/image.hpp"
#include "photodoodle/rng.hpp"

namespace photodoodle {

// Procedural paired-edit corpus: simple scenes (gradient + solid shapes) with
// six deterministic edit styles, exact ground-truth targets and edit masks.

struct NamedColor {
    const char* name;
    std::array<float, 3> rgb;
};

inline const std::vector<NamedColor>& palette() {
    static const std::vector<NamedColor> p = {
        {"red", {0.90f, 0.10f, 0.10f}},    {"green", {0.10f, 0.80f, 0.10f}},
        {"blue", {0.10f, 0.20f, 0.90f}},   {"yellow", {0.95f, 0.90f, 0.10f}},
        {"purple", {0.60f, 0.15f, 0.80f}}, {"orange", {0.95f, 0.55f, 0.10f}},
        {"cyan", {0.10f, 0.85f, 0.90f}},
    };
    return p;
}

/// every word any generated instruction can use; ids are stable
inline Vocab dataset_vocab() {
    return Vocab({"<pad>", "<unk>", "add", "around", "block", "blue", "circle", "cyan",
                  "draw", "frame", "green", "halo", "largest", "make", "monochrome",
                  "near", "orange", "outline", "purple", "recolor", "red", "shape",
                  "sparkles", "square", "the", "triangle", "with", "yellow"},
                 8);
}

enum ShapeKind { kSquare = 0, kCircle = 1, kTriangle = 2 };

inline const char* shape_name(int kind) {
    switch (kind) {
        case kSquare: return "square";
        case kCircle: return "circle";
        default: return "triangle";
    }
}

struct ShapeInfo {
    int kind = 0;
    int color = 0;               // palette index
    int y0 = 0, x0 = 0, size = 0;  // square/triangle geometry
    int cy = 0, cx = 0, r = 0;     // circle geometry
    std::vector<int> pixels;     // visible pixels, flattened i*W+j
};

struct Scene {
    int H = 0, W = 0;
    Image img;
    std::vector<ShapeInfo> shapes;
};

/// 2-color linear gradient plus 1-3 solid shapes; visible pixels recorded
inline Scene gen_scene(uint64_t seed, int H, int W) {
    if (H < 8 || W < 8) throw config_error("scene needs at least 8x8 pixels");
    Rng rng(seed);
    Scene sc;
    sc.H = H;
    sc.W = W;
    sc.img = Image({H, W, 3});
    float c0[3], c1[3];
    for (int c = 0; c < 3; ++c) {
        c0[c] = 0.10f + 0.80f * static_cast<float>(rng.next_double());
        c1[c] = 0.10f + 0.80f * static_cast<float>(rng.next_double());
    }
    bool vertical = rng.next_below(2) == 0;
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
            float a = vertical ? static_cast<float>(i) / (H - 1) : static_cast<float>(j) / (W - 1);
            for (int c = 0; c < 3; ++c)
                sc.img.data[(static_cast<size_t>(i) * W + j) * 3 + c] =
                    (1.0f - a) * c0[c] + a * c1[c];
        }

    int nshapes = 1 + static_cast<int>(rng.next_below(3));
    std::vector<int> owner(static_cast<size_t>(H) * W, -1);
    for (int s = 0; s < nshapes; ++s) {
        ShapeInfo sh;
        sh.kind = static_cast<int>(rng.next_below(3));
        sh.color = static_cast<int>(rng.next_below(palette().size()));
        auto paint = [&](int i, int j) {
            if (i < 0 || i >= H || j < 0 || j >= W) return;
            owner[static_cast<size_t>(i) * W + j] = s;
            for (int c = 0; c < 3; ++c)
                sc.img.data[(static_cast<size_t>(i) * W + j) * 3 + c] = palette()[sh.color].rgb[c];
        };
        if (sh.kind == kCircle) {
            sh.r = 2 + static_cast<int>(rng.next_below(std::max(1, H / 6)));
            sh.cy = sh.r + static_cast<int>(rng.next_below(std::max(1, H - 2 * sh.r)));
            sh.cx = sh.r + static_cast<int>(rng.next_below(std::max(1, W - 2 * sh.r)));
            for (int i = sh.cy - sh.r; i <= sh.cy + sh.r; ++i)
                for (int j = sh.cx - sh.r; j <= sh.cx + sh.r; ++j)
                    if ((i - sh.cy) * (i - sh.cy) + (j - sh.cx) * (j - sh.cx) <= sh.r * sh.r)
                        paint(i, j);
        } else {
            int cap = std::max(2, H / 3);
            sh.size = 3 + static_cast<int>(rng.next_below(cap));
            sh.y0 = static_cast<int>(rng.next_below(std::max(1, H - sh.size)));
            sh.x0 = static_cast<int>(rng.next_below(std::max(1, W - sh.size)));
            for (int di = 0; di < sh.size; ++di) {
                int row_len = sh.kind == kSquare ? sh.size : sh.size - di;
                for (int dj = 0; dj < row_len; ++dj) paint(sh.y0 + di, sh.x0 + dj);
            }
        }
        sc.shapes.push_back(std::move(sh));
    }
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
            int s = owner[static_cast<size_t>(i) * W + j];
            if (s >= 0) sc.shapes[s].pixels.push_back(i * W + j);
        }
    return sc;
}

struct EditPair {
    std::string id;
    Image src, tgt;
    Mask mask;
    std::string instruction;
    int style = 0;
    uint64_t seed = 0;
};

namespace detail {

inline int largest_shape(const Scene& sc) {
    int best = -1;
    size_t best_n = 0;
    for (size_t s = 0; s < sc.shapes.size(); ++s)
        if (sc.shapes[s].pixels.size() > best_n) {
            best = static_cast<int>(s);
            best_n = sc.shapes[s].pixels.size();
        }
    if (best < 0) throw data_error("scene has no visible shape");
    return best;
}

inline void set_px(EditPair& p, int W, int i, int j, const std::array<float, 3>& rgb) {
    for (int c = 0; c < 3; ++c) p.tgt.data[(static_cast<size_t>(i) * W + j) * 3 + c] = rgb[c];
    p.mask.data[static_cast<size_t>(i) * W + j] = 1.0f;
}

inline int other_color(int avoid, Rng& rng) {
    int n = static_cast<int>(palette().size());
    return (avoid + 1 + static_cast<int>(rng.next_below(n - 1))) % n;
}

}  // namespace detail

/// Styles: 1 outline, 2 frame, 3 recolor, 4 sparkle, 5 monochrome+block, 6 halo.
/// Throws data_error when the scene cannot host the style (caller resamples).
inline EditPair apply_style(int style, const Scene& sc, uint64_t seed) {
    if (style < 1 || style > 6) throw config_error("style id must be 1..6");
    int H = sc.H, W = sc.W;
    Rng rng(mix_seed(seed, 0xED17));
    EditPair p;
    p.style = style;
    p.seed = seed;
    p.src = sc.img;
    p.tgt = sc.img;
    p.mask = Mask::zeros({H, W});

    switch (style) {
        case 1: {  // 1-px contour around the largest shape
            const auto& sh = sc.shapes[detail::largest_shape(sc)];
            auto rgb = palette()[detail::other_color(sh.color, rng)].rgb;
            std::vector<char> in_shape(static_cast<size_t>(H) * W, 0);
            for (int px : sh.pixels) in_shape[px] = 1;
            int painted = 0;
            for (int px : sh.pixels) {
                int i = px / W, j = px % W;
                const int di[4] = {-1, 1, 0, 0}, dj[4] = {0, 0, -1, 1};
                for (int k = 0; k < 4; ++k) {
                    int ni = i + di[k], nj = j + dj[k];
                    if (ni < 0 || ni >= H || nj < 0 || nj >= W) continue;
                    if (in_shape[static_cast<size_t>(ni) * W + nj]) continue;
                    detail::set_px(p, W, ni, nj, rgb);
                    ++painted;
                }
            }
            if (painted == 0) throw data_error("outline style: empty contour");
            p.instruction = "draw outline around the largest shape";
            break;
        }
        case 2: {  // k-px colored border
            int k = 1 + static_cast<int>(rng.next_below(2));
            const auto& col = palette()[rng.next_below(palette().size())];
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j)
                    if (i < k || i >= H - k || j < k || j >= W - k)
                        detail::set_px(p, W, i, j, col.rgb);
            p.instruction = std::string("add ") + col.name + " frame";
            break;
        }
        case 3: {  // recolor the largest shape
            const auto& sh = sc.shapes[detail::largest_shape(sc)];
            int nc = detail::other_color(sh.color, rng);
            for (int px : sh.pixels) detail::set_px(p, W, px / W, px % W, palette()[nc].rgb);
            p.instruction = std::string("recolor the ") + shape_name(sh.kind) + " " +
                            palette()[nc].name;
            break;
        }
        case 4: {  // deterministic dots near the largest shape
            const auto& sh = sc.shapes[detail::largest_shape(sc)];
            int ymin = H, ymax = 0, xmin = W, xmax = 0;
            for (int px : sh.pixels) {
                ymin = std::min(ymin, px / W);
                ymax = std::max(ymax, px / W);
                xmin = std::min(xmin, px % W);
                xmax = std::max(xmax, px % W);
            }
            ymin = std::max(0, ymin - 2);
            xmin = std::max(0, xmin - 2);
            ymax = std::min(H - 1, ymax + 2);
            xmax = std::min(W - 1, xmax + 2);
            const auto& col = palette()[3];  // yellow sparkles
            int ndots = 4 + static_cast<int>(rng.next_below(5));
            for (int d = 0; d < ndots; ++d) {
                int i = ymin + static_cast<int>(rng.next_below(ymax - ymin + 1));
                int j = xmin + static_cast<int>(rng.next_below(xmax - xmin + 1));
                detail::set_px(p, W, i, j, col.rgb);
            }
            p.instruction = std::string("add sparkles near the ") + shape_name(sh.kind);
            break;
        }
        case 5: {  // grayscale everything, then one colored block; mask = all
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    size_t base = (static_cast<size_t>(i) * W + j) * 3;
                    float g = 0.299f * p.src.data[base] + 0.587f * p.src.data[base + 1] +
                              0.114f * p.src.data[base + 2];
                    for (int c = 0; c < 3; ++c) p.tgt.data[base + c] = g;
                }
            const auto& sh = sc.shapes[detail::largest_shape(sc)];
            int cy = 0, cx = 0;
            for (int px : sh.pixels) {
                cy += px / W;
                cx += px % W;
            }
            cy /= static_cast<int>(sh.pixels.size());
            cx /= static_cast<int>(sh.pixels.size());
            const auto& col = palette()[rng.next_below(palette().size())];
            int half = std::max(1, H / 8);
            for (int i = std::max(0, cy - half); i <= std::min(H - 1, cy + half); ++i)
                for (int j = std::max(0, cx - half); j <= std::min(W - 1, cx + half); ++j)
                    for (int c = 0; c < 3; ++c)
                        p.tgt.data[(static_cast<size_t>(i) * W + j) * 3 + c] = col.rgb[c];
            p.mask = Mask::full({H, W}, 1.0f);
            p.instruction = std::string("make monochrome with ") + col.name + " block";
            break;
        }
        case 6: {  // concentric ring around a circle
            int best = -1;
            for (size_t s = 0; s < sc.shapes.size(); ++s)
                if (sc.shapes[s].kind == kCircle && !sc.shapes[s].pixels.empty() &&
                    (best < 0 || sc.shapes[s].r > sc.shapes[best].r))
                    best = static_cast<int>(s);
            if (best < 0) throw data_error("halo style: scene has no circle");
            const auto& sh = sc.shapes[best];
            auto rgb = palette()[detail::other_color(sh.color, rng)].rgb;
            int lo = (sh.r + 1) * (sh.r + 1), hi = (sh.r + 2) * (sh.r + 2);
            int painted = 0;
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    int d2 = (i - sh.cy) * (i - sh.cy) + (j - sh.cx) * (j - sh.cx);
                    if (d2 >= lo && d2 <= hi) {
                        detail::set_px(p, W, i, j, rgb);
                        ++painted;
                    }
                }
            if (painted == 0) throw data_error("halo style: ring falls outside the image");
            p.instruction = "draw halo around the circle";
            break;
        }
    }
    bool any = false;
    for (float v : p.mask.data) any = any || v > 0.0f;
    if (!any) throw data_error("style produced an empty mask");
    return p;
}

/// resample scenes (bounded) until the style's preconditions hold
inline EditPair gen_pair(int style, uint64_t seed, int H, int W) {
    for (int retry = 0; retry < 64; ++retry) {
        Scene sc = gen_scene(mix_seed(seed, 1000 + retry), H, W);
        try {
            return apply_style(style, sc, seed);
        } catch (const data_error&) {
            // scene cannot host the style; try the next deterministic scene
        }
    }
    throw data_error("could not generate a scene for style " + std::to_string(style));
}

/// kind "general" mixes all six styles; kind "style" fixes one style id
inline void gen_corpus(const std::string& kind, int count, uint64_t seed,
                       const std::string& out_dir, int style = 0, int H = 16, int W = 16) {
    bool general = kind == "general";
    if (!general && kind != "style")
        throw config_error("corpus kind must be 'general' or 'style', got '" + kind + "'");
    if (!general && (style < 1 || style > 6))
        throw config_error("style corpus needs --style in 1..6");
    if (count < 1) throw config_error("corpus count must be >= 1");
    std::filesystem::create_directories(out_dir);
    std::ofstream manifest(out_dir + "/manifest.jsonl", std::ios::binary);
    if (!manifest) throw data_error("cannot write manifest in " + out_dir);
    dataset_vocab().save(out_dir + "/vocab.txt");
    Rng style_rng(mix_seed(seed, 0xC0));
    for (int i = 0; i < count; ++i) {
        int st = general ? 1 + static_cast<int>(style_rng.next_below(6)) : style;
        uint64_t pair_seed = mix_seed(seed, static_cast<uint64_t>(i));
        EditPair p = gen_pair(st, pair_seed, H, W);
        char idbuf[32];
        std::snprintf(idbuf, sizeof(idbuf), "%016llx_%05d",
                      static_cast<unsigned long long>(seed), i);
        p.id = idbuf;
        std::string src = p.id + "_src.ppm", tgt = p.id + "_tgt.ppm", msk = p.id + "_mask.pgm";
        write_ppm(out_dir + "/" + src, p.src);
        write_ppm(out_dir + "/" + tgt, p.tgt);
        write_pgm(out_dir + "/" + msk, p.mask);
        nlohmann::json j{{"id", p.id},       {"style", p.style}, {"instruction", p.instruction},
                         {"src", src},       {"tgt", tgt},       {"mask", msk},
                         {"seed", p.seed}};
        manifest << j.dump() << "\n";
    }
    if (!manifest) throw data_error("manifest write failed in " + out_dir);
}

/// load and validate every pair; the background invariant is enforced here
inline std::vector<EditPair> load_corpus(const std::string& dir) {
    std::ifstream manifest(dir + "/manifest.jsonl");
    if (!manifest) throw data_error("no manifest in " + dir);
    std::vector<EditPair> pairs;
    std::string line;
    int lineno = 0;
    while (std::getline(manifest, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw data_error(dir + "/manifest.jsonl:" + std::to_string(lineno) +
                             ": malformed JSON");
        EditPair p;
        p.id = j.at("id").get<std::string>();
        p.style = j.at("style").get<int>();
        p.instruction = j.at("instruction").get<std::string>();
        p.seed = j.at("seed").get<uint64_t>();
        p.src = read_ppm(dir + "/" + j.at("src").get<std::string>());
        p.tgt = read_ppm(dir + "/" + j.at("tgt").get<std::string>());
        p.mask = read_pgm(dir + "/" + j.at("mask").get<std::string>());
        if (p.src.shape != p.tgt.shape)
            throw data_error("pair " + p.id + ": src/tgt size mismatch");
        if (p.mask.rank() != 2 || p.mask.shape[0] != p.src.shape[0] ||
            p.mask.shape[1] != p.src.shape[1])
            throw data_error("pair " + p.id + ": mask size mismatch");
        int H = p.src.shape[0], W = p.src.shape[1];
        bool edited = false;
        const float tol = 1.0f / 255.0f + 1e-6f;
        for (int i = 0; i < H; ++i)
            for (int j2 = 0; j2 < W; ++j2) {
                float m = p.mask.data[static_cast<size_t>(i) * W + j2];
                if (m > 0.0f) {
                    edited = true;
                    continue;
                }
                for (int c = 0; c < 3; ++c) {
                    size_t at = (static_cast<size_t>(i) * W + j2) * 3 + c;
                    if (std::abs(p.src.data[at] - p.tgt.data[at]) > tol)
                        throw data_error("pair " + p.id +
                                         ": background differs outside the mask at (" +
                                         std::to_string(i) + "," + std::to_string(j2) + ")");
                }
            }
        if (!edited) throw data_error("pair " + p.id + ": mask has no edited pixel");
        pairs.push_back(std::move(p));
    }
    if (pairs.empty()) throw data_error("empty corpus in " + dir);
    return pairs;
}

}  // namespace photodoodle
