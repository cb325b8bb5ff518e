#include "disendiff/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace disendiff {

namespace {
constexpr int kN = kImageSize;
constexpr double kPi = 3.14159265358979323846;

const std::array<std::pair<const char*, std::array<double, 3>>, 8> kPalette = {{
    {"red", {1, 0, 0}},
    {"green", {0, 1, 0}},
    {"blue", {0, 0, 1}},
    {"yellow", {1, 1, 0}},
    {"cyan", {0, 1, 1}},
    {"magenta", {1, 0, 1}},
    {"orange", {1, 0.5, 0}},
    {"white", {1, 1, 1}},
}};
}  // namespace

std::string shape_name(ShapeKind k) {
    switch (k) {
        case ShapeKind::disc: return "disc";
        case ShapeKind::square: return "square";
        case ShapeKind::triangle: return "triangle";
        case ShapeKind::ring: return "ring";
    }
    return "?";
}

ShapeKind shape_from_name(const std::string& name) {
    if (name == "disc") return ShapeKind::disc;
    if (name == "square") return ShapeKind::square;
    if (name == "triangle") return ShapeKind::triangle;
    if (name == "ring") return ShapeKind::ring;
    throw std::invalid_argument("unknown shape '" + name + "'");
}

namespace {

bool inside_shape(const ConceptInstance& inst, double x, double y) {
    const double dx = x - inst.cx, dy = y - inst.cy;
    switch (inst.shape) {
        case ShapeKind::disc:
            return dx * dx + dy * dy <= inst.radius * inst.radius;
        case ShapeKind::square:
            return std::abs(dx) <= inst.radius && std::abs(dy) <= inst.radius;
        case ShapeKind::ring: {
            const double d2 = dx * dx + dy * dy;
            const double ro = inst.radius, ri = 0.5 * inst.radius;
            return d2 <= ro * ro && d2 >= ri * ri;
        }
        case ShapeKind::triangle: {
            // up-pointing triangle inscribed in the radius circle
            const double r = inst.radius;
            const std::array<std::array<double, 2>, 3> v = {{
                {inst.cx, inst.cy - r},
                {inst.cx - r * 0.8660254037844386, inst.cy + r * 0.5},
                {inst.cx + r * 0.8660254037844386, inst.cy + r * 0.5},
            }};
            auto cross = [&](int i, int j) {
                return (v[static_cast<size_t>(j)][0] - v[static_cast<size_t>(i)][0]) *
                           (y - v[static_cast<size_t>(i)][1]) -
                       (v[static_cast<size_t>(j)][1] - v[static_cast<size_t>(i)][1]) *
                           (x - v[static_cast<size_t>(i)][0]);
            };
            const double c0 = cross(0, 1), c1 = cross(1, 2), c2 = cross(2, 0);
            return (c0 >= 0 && c1 >= 0 && c2 >= 0) || (c0 <= 0 && c1 <= 0 && c2 <= 0);
        }
    }
    return false;
}

double shape_reach(const ConceptInstance& inst) {
    // farthest extent from center, for the in-frame margin check
    return inst.shape == ShapeKind::square ? inst.radius * std::sqrt(2.0) : inst.radius;
}

}  // namespace

void SceneSpec::validate() const {
    if (instances.empty() || instances.size() > 3)
        throw std::invalid_argument("scene: need 1..3 instances");
    for (const auto& inst : instances) {
        const double reach =
            inst.shape == ShapeKind::square ? inst.radius : shape_reach(inst);
        if (inst.cx - reach < 1 || inst.cx + reach > kN - 1 ||
            inst.cy - reach < 1 || inst.cy + reach > kN - 1)
            throw std::invalid_argument("scene: instance leaves the frame margin");
        if (inst.radius < 2)
            throw std::invalid_argument("scene: instance too small");
    }
    if (masks.size() == instances.size()) {
        for (size_t i = 0; i < masks.size(); ++i)
            for (size_t j = i + 1; j < masks.size(); ++j) {
                int overlap = 0, ai = 0, aj = 0;
                for (int p = 0; p < kN * kN; ++p) {
                    overlap += masks[i][static_cast<size_t>(p)] && masks[j][static_cast<size_t>(p)];
                    ai += masks[i][static_cast<size_t>(p)];
                    aj += masks[j][static_cast<size_t>(p)];
                }
                if (overlap * 10 >= std::min(ai, aj) && std::min(ai, aj) > 0)
                    throw std::invalid_argument("scene: instance masks overlap >= 10%");
            }
    }
}

Tensor render_scene(SceneSpec& spec) {
    if (spec.instances.size() > 3)
        throw std::invalid_argument("scene: too many instances");
    constexpr int ss = 4;  // supersamples per axis
    std::vector<double> data(static_cast<size_t>(3) * kN * kN);
    spec.masks.assign(spec.instances.size(), std::vector<uint8_t>(kN * kN, 0));

    for (int i = 0; i < kN; ++i)
        for (int j = 0; j < kN; ++j) {
            std::vector<double> cover(spec.instances.size(), 0.0);
            for (int si = 0; si < ss; ++si)
                for (int sj = 0; sj < ss; ++sj) {
                    const double y = i + (si + 0.5) / ss;
                    const double x = j + (sj + 0.5) / ss;
                    // front-most instance wins at each subsample
                    for (size_t k = spec.instances.size(); k-- > 0;) {
                        if (inside_shape(spec.instances[k], x, y)) {
                            cover[k] += 1.0;
                            break;
                        }
                    }
                }
            double rgb[3] = {spec.background, spec.background, spec.background};
            for (size_t k = 0; k < spec.instances.size(); ++k) {
                const double a = cover[k] / (ss * ss);
                if (a <= 0) continue;
                std::array<double, 3> col = spec.instances[k].color;
                if (spec.instances[k].stripe_texture && (i / 2) % 2 == 1)
                    for (auto& ch : col) ch *= 0.6;
                for (int c = 0; c < 3; ++c)
                    rgb[c] = (1 - a) * rgb[c] + a * (2.0 * col[static_cast<size_t>(c)] - 1.0);
                if (a > 0.5) spec.masks[k][static_cast<size_t>(i * kN + j)] = 1;
            }
            for (int c = 0; c < 3; ++c)
                data[static_cast<size_t>((c * kN + i) * kN + j)] = rgb[c];
        }
    spec.validate();
    return Tensor::from_data({3, kN, kN}, std::move(data));
}

SceneSpec random_scene(std::mt19937& rng, int n_instances,
                       const std::vector<ShapeKind>* allowed, bool allow_stripes,
                       bool color_words) {
    if (n_instances < 1 || n_instances > 3)
        throw std::invalid_argument("random_scene: 1..3 instances");
    static const std::vector<ShapeKind> all_shapes = {
        ShapeKind::disc, ShapeKind::square, ShapeKind::triangle, ShapeKind::ring};
    const std::vector<ShapeKind>& shapes = allowed ? *allowed : all_shapes;

    std::uniform_real_distribution<double> unit(0.0, 1.0);
    SceneSpec spec;
    spec.background = -0.1 + 0.2 * unit(rng);

    // distinct shapes and distinct colors per scene
    std::vector<ShapeKind> pool = shapes;
    std::vector<int> color_pool(kPalette.size());
    for (size_t i = 0; i < color_pool.size(); ++i) color_pool[i] = static_cast<int>(i);

    for (int restart = 0;; ++restart) {
        spec.instances.clear();
        std::vector<ShapeKind> pool_live = pool;
        std::vector<int> colors_live = color_pool;
        bool scene_ok = true;
        for (int k = 0; k < n_instances && scene_ok; ++k) {
            ConceptInstance inst;
            const size_t si =
                static_cast<size_t>(unit(rng) * static_cast<double>(pool_live.size())) %
                pool_live.size();
            inst.shape = pool_live[si];
            if (pool_live.size() > 1)
                pool_live.erase(pool_live.begin() + static_cast<std::ptrdiff_t>(si));
            const size_t ci =
                static_cast<size_t>(unit(rng) * static_cast<double>(colors_live.size())) %
                colors_live.size();
            inst.color = kPalette[static_cast<size_t>(colors_live[ci])].second;
            colors_live.erase(colors_live.begin() + static_cast<std::ptrdiff_t>(ci));
            inst.stripe_texture = allow_stripes && unit(rng) < 0.2;

            const double rmin = n_instances == 1 ? 5.0 : 4.5;
            const double rmax = n_instances == 1 ? 9.0 : 6.0;
            bool placed = false;
            for (int attempt = 0; attempt < 50 && !placed; ++attempt) {
                inst.radius = rmin + (rmax - rmin) * unit(rng);
                const double reach = shape_reach(inst) + 1.2;
                inst.cx = reach + (kN - 2 * reach) * unit(rng);
                inst.cy = reach + (kN - 2 * reach) * unit(rng);
                placed = true;
                for (const auto& other : spec.instances) {
                    const double dx = inst.cx - other.cx, dy = inst.cy - other.cy;
                    // keep a >= 2 px gap so anti-aliased boundaries never make
                    // two instances 8-connected in the foreground mask
                    const double sep = shape_reach(inst) + shape_reach(other) + 2.5;
                    if (dx * dx + dy * dy < sep * sep) placed = false;
                }
            }
            if (!placed) scene_ok = false;
            spec.instances.push_back(inst);
        }
        if (scene_ok) break;
        if (restart >= 100) throw std::runtime_error("random_scene: placement failed");
    }

    std::ostringstream caption;
    const bool with_colors = color_words && n_instances <= 2;
    for (size_t k = 0; k < spec.instances.size(); ++k) {
        if (k) caption << " and ";
        caption << "a ";
        if (with_colors) {
            for (const auto& [name, rgb] : kPalette)
                if (rgb == spec.instances[k].color) caption << name << " ";
        }
        caption << shape_name(spec.instances[k].shape);
    }
    spec.caption = caption.str();
    return spec;
}

// ---- detector ----------------------------------------------------------------

namespace {

struct Component {
    std::vector<uint8_t> mask;
    int area = 0;
    double min_x = kN, max_x = 0, min_y = kN, max_y = 0;
};

std::vector<Component> connected_components(const std::vector<uint8_t>& fg) {
    std::vector<int> label(static_cast<size_t>(kN) * kN, -1);
    std::vector<Component> comps;
    std::vector<int> stack;
    for (int p = 0; p < kN * kN; ++p) {
        if (!fg[static_cast<size_t>(p)] || label[static_cast<size_t>(p)] >= 0) continue;
        const int id = static_cast<int>(comps.size());
        comps.emplace_back();
        comps.back().mask.assign(static_cast<size_t>(kN) * kN, 0);
        stack.push_back(p);
        label[static_cast<size_t>(p)] = id;
        while (!stack.empty()) {
            const int q = stack.back();
            stack.pop_back();
            const int y = q / kN, x = q % kN;
            Component& c = comps.back();
            c.mask[static_cast<size_t>(q)] = 1;
            ++c.area;
            c.min_x = std::min(c.min_x, static_cast<double>(x));
            c.max_x = std::max(c.max_x, static_cast<double>(x));
            c.min_y = std::min(c.min_y, static_cast<double>(y));
            c.max_y = std::max(c.max_y, static_cast<double>(y));
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int ny = y + dy, nx = x + dx;
                    if (ny < 0 || ny >= kN || nx < 0 || nx >= kN) continue;
                    const int np = ny * kN + nx;
                    if (fg[static_cast<size_t>(np)] && label[static_cast<size_t>(np)] < 0) {
                        label[static_cast<size_t>(np)] = id;
                        stack.push_back(np);
                    }
                }
        }
    }
    return comps;
}

bool has_hole(const Component& c) {
    // flood the complement from the border (4-connectivity); leftover
    // complement pixels inside the bounding box are holes
    std::vector<uint8_t> visited(static_cast<size_t>(kN) * kN, 0);
    std::vector<int> stack;
    for (int i = 0; i < kN; ++i) {
        for (int p : {i, (kN - 1) * kN + i, i * kN, i * kN + kN - 1})
            if (!c.mask[static_cast<size_t>(p)] && !visited[static_cast<size_t>(p)]) {
                visited[static_cast<size_t>(p)] = 1;
                stack.push_back(p);
            }
    }
    while (!stack.empty()) {
        const int q = stack.back();
        stack.pop_back();
        const int y = q / kN, x = q % kN;
        const int d4[4][2] = {{0, 1}, {0, -1}, {1, 0}, {-1, 0}};
        for (const auto& d : d4) {
            const int ny = y + d[0], nx = x + d[1];
            if (ny < 0 || ny >= kN || nx < 0 || nx >= kN) continue;
            const int np = ny * kN + nx;
            if (!c.mask[static_cast<size_t>(np)] && !visited[static_cast<size_t>(np)]) {
                visited[static_cast<size_t>(np)] = 1;
                stack.push_back(np);
            }
        }
    }
    int hole_area = 0;
    for (int p = 0; p < kN * kN; ++p)
        if (!c.mask[static_cast<size_t>(p)] && !visited[static_cast<size_t>(p)]) ++hole_area;
    return hole_area >= 2;
}

// Moore-neighbor boundary tracing, clockwise.
std::vector<std::array<int, 2>> trace_contour(const Component& c) {
    int start = -1;
    for (int p = 0; p < kN * kN && start < 0; ++p)
        if (c.mask[static_cast<size_t>(p)]) start = p;
    std::vector<std::array<int, 2>> contour;
    if (start < 0) return contour;
    const int sy = start / kN, sx = start % kN;
    // neighbor order: E SE S SW W NW N NE
    const int dir[8][2] = {{0, 1}, {1, 1}, {1, 0}, {1, -1},
                           {0, -1}, {-1, -1}, {-1, 0}, {-1, 1}};
    auto at = [&](int y, int x) {
        return y >= 0 && y < kN && x >= 0 && x < kN &&
               c.mask[static_cast<size_t>(y * kN + x)];
    };
    int cy = sy, cx = sx, backtrack = 4;  // came from the west
    contour.push_back({cy, cx});
    for (int steps = 0; steps < 4 * kN * kN; ++steps) {
        bool moved = false;
        for (int k = 0; k < 8; ++k) {
            const int d = (backtrack + 1 + k) % 8;
            const int ny = cy + dir[d][0], nx = cx + dir[d][1];
            if (at(ny, nx)) {
                backtrack = (d + 4) % 8;
                cy = ny;
                cx = nx;
                moved = true;
                break;
            }
        }
        if (!moved) break;  // isolated pixel
        if (cy == sy && cx == sx) break;
        contour.push_back({cy, cx});
    }
    return contour;
}

double contour_perimeter(const std::vector<std::array<int, 2>>& c) {
    if (c.size() < 2) return 1.0;
    double p = 0;
    for (size_t i = 0; i < c.size(); ++i) {
        const auto& a = c[i];
        const auto& b = c[(i + 1) % c.size()];
        const int dy = std::abs(a[0] - b[0]), dx = std::abs(a[1] - b[1]);
        p += (dx + dy == 2) ? std::sqrt(2.0) : 1.0;
    }
    return p;
}

double point_line_dist(const std::array<int, 2>& p, const std::array<int, 2>& a,
                       const std::array<int, 2>& b) {
    const double vx = b[1] - a[1], vy = b[0] - a[0];
    const double wx = p[1] - a[1], wy = p[0] - a[0];
    const double len = std::sqrt(vx * vx + vy * vy);
    if (len < 1e-9) return std::sqrt(wx * wx + wy * wy);
    return std::abs(vx * wy - vy * wx) / len;
}

void dp_simplify(const std::vector<std::array<int, 2>>& pts, size_t lo, size_t hi,
                 double eps, std::vector<uint8_t>& keep) {
    if (hi <= lo + 1) return;
    double dmax = 0;
    size_t idx = lo;
    for (size_t i = lo + 1; i < hi; ++i) {
        const double d = point_line_dist(pts[i], pts[lo], pts[hi % pts.size()]);
        if (d > dmax) {
            dmax = d;
            idx = i;
        }
    }
    if (dmax > eps) {
        keep[idx] = 1;
        dp_simplify(pts, lo, idx, eps, keep);
        dp_simplify(pts, idx, hi, eps, keep);
    }
}

int corner_count(const std::vector<std::array<int, 2>>& contour, double eps) {
    if (contour.size() < 4) return static_cast<int>(contour.size());
    // anchor on the two mutually farthest points, then Douglas-Peucker both arcs
    size_t a = 0, b = 0;
    double best = -1;
    for (size_t i = 0; i < contour.size(); ++i)
        for (size_t j = i + 1; j < contour.size(); ++j) {
            const double dy = contour[i][0] - contour[j][0];
            const double dx = contour[i][1] - contour[j][1];
            const double d = dy * dy + dx * dx;
            if (d > best) {
                best = d;
                a = i;
                b = j;
            }
        }
    // rotate so the contour starts at `a`
    std::vector<std::array<int, 2>> pts(contour.size());
    for (size_t i = 0; i < contour.size(); ++i)
        pts[i] = contour[(a + i) % contour.size()];
    const size_t bpos = (b + contour.size() - a) % contour.size();
    std::vector<uint8_t> keep(pts.size() + 1, 0);
    keep[0] = keep[bpos] = 1;
    dp_simplify(pts, 0, bpos, eps, keep);
    dp_simplify(pts, bpos, pts.size(), eps, keep);
    int n = 0;
    for (size_t i = 0; i < pts.size(); ++i) n += keep[i];
    return n;
}

}  // namespace

std::vector<Detection> detect_concepts(const Tensor& image) {
    const Shape& s = image.shape();
    if (s.size() != 3 || s[0] != 3 || s[1] != kN || s[2] != kN)
        throw std::invalid_argument("detect_concepts: expected (3,32,32) image");
    // median background per channel
    std::array<double, 3> bg{};
    for (int c = 0; c < 3; ++c) {
        std::vector<double> ch(image.data().begin() + static_cast<std::ptrdiff_t>(c) * kN * kN,
                               image.data().begin() + static_cast<std::ptrdiff_t>(c + 1) * kN * kN);
        std::nth_element(ch.begin(), ch.begin() + ch.size() / 2, ch.end());
        bg[static_cast<size_t>(c)] = ch[ch.size() / 2];
    }
    std::vector<uint8_t> fg(static_cast<size_t>(kN) * kN, 0);
    for (int p = 0; p < kN * kN; ++p) {
        double dev = 0;
        for (int c = 0; c < 3; ++c)
            dev = std::max(dev, std::abs(image.at(c * kN * kN + p) - bg[static_cast<size_t>(c)]));
        fg[static_cast<size_t>(p)] = dev > 0.25;
    }

    std::vector<double> devs(static_cast<size_t>(kN) * kN, 0.0);
    for (int p = 0; p < kN * kN; ++p) {
        double dev = 0;
        for (int c = 0; c < 3; ++c)
            dev = std::max(dev, std::abs(image.at(c * kN * kN + p) - bg[static_cast<size_t>(c)]));
        devs[static_cast<size_t>(p)] = dev;
    }

    std::vector<Detection> out;
    for (Component comp : connected_components(fg)) {
        if (comp.area < 8) continue;
        // The loose threshold picks up the anti-aliased boundary ring.  An
        // interior pixel deviates from the background by the full color
        // distance D, a boundary pixel with coverage a by a*D, so keeping
        // pixels above 0.5 * max deviation reproduces the > 50% coverage rule
        // the ground-truth masks use.
        {
            double peak = 0;
            for (int p = 0; p < kN * kN; ++p)
                if (comp.mask[static_cast<size_t>(p)])
                    peak = std::max(peak, devs[static_cast<size_t>(p)]);
            // the tiny margin keeps exactly-half-covered pixels out, matching
            // the strict > 0.5 rule (coverage is quantized to 1/16 steps)
            const double cut = 0.501 * peak;
            Component refined;
            refined.mask.assign(static_cast<size_t>(kN) * kN, 0);
            for (int p = 0; p < kN * kN; ++p)
                if (comp.mask[static_cast<size_t>(p)] && devs[static_cast<size_t>(p)] > cut) {
                    refined.mask[static_cast<size_t>(p)] = 1;
                    ++refined.area;
                }
            if (refined.area >= 8) comp = std::move(refined);
        }
        Detection det;
        det.mask = comp.mask;
        det.area = comp.area;
        for (int c = 0; c < 3; ++c) {
            double acc = 0;
            for (int p = 0; p < kN * kN; ++p)
                if (comp.mask[static_cast<size_t>(p)]) acc += image.at(c * kN * kN + p);
            det.mean_color[static_cast<size_t>(c)] =
                std::clamp((acc / comp.area + 1.0) * 0.5, 0.0, 1.0);
        }
        const auto contour = trace_contour(comp);
        const double perim = contour_perimeter(contour);
        const double circularity = 4.0 * kPi * comp.area / (perim * perim);
        // Two simplification scales: a coarse pass flattens a disc's arcs for
        // the triangle-vs-rest decision, a fine pass keeps enough arc vertices
        // to split disc (>= 5 corners) from square (exactly 4).  A pixelated
        // small disc occasionally simplifies to 4 corners, but its circularity
        // then sits above any square's (squares top out around 1.03).
        const int corners_coarse = corner_count(contour, std::max(1.0, 0.06 * perim));
        const int corners_fine = corner_count(contour, std::max(1.0, 0.03 * perim));
        if (has_hole(comp))
            det.shape = ShapeKind::ring;
        else if (corners_coarse == 3)
            det.shape = ShapeKind::triangle;
        else if ((corners_fine >= 5 && circularity >= 0.9) ||
                 (corners_fine == 4 && circularity > 1.04))
            det.shape = ShapeKind::disc;
        else
            det.shape = ShapeKind::square;
        out.push_back(std::move(det));
    }
    return out;
}

double attention_mask_iou(const Tensor& map, const std::vector<uint8_t>& mask) {
    const Shape& s = map.shape();
    if (s.size() != 2 || s[0] != 16 || s[1] != 16)
        throw std::invalid_argument("attention_mask_iou: expected (16,16) map");
    if (static_cast<int>(mask.size()) != kN * kN)
        throw std::invalid_argument("attention_mask_iou: expected 32x32 mask");
    double mx = 0;
    for (double v : map.data()) mx = std::max(mx, v);
    if (mx <= 0) return 0.0;
    int inter = 0, uni = 0;
    for (int i = 0; i < 16; ++i)
        for (int j = 0; j < 16; ++j) {
            int cover = 0;
            for (int di = 0; di < 2; ++di)
                for (int dj = 0; dj < 2; ++dj)
                    cover += mask[static_cast<size_t>((2 * i + di) * kN + 2 * j + dj)];
            const bool m = cover > 2;  // area average > 0.5
            const bool a = map.at(i * 16 + j) > 0.5 * mx;
            inter += m && a;
            uni += m || a;
        }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
}

// ---- disentanglement evaluation ------------------------------------------------

void MetricsReport::save_csv(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("metrics: cannot open " + path);
    f << "family,prompt,samples,presence,leakage,color_error,attn_iou\n";
    for (const auto& r : rows)
        f << r.family << ",\"" << r.prompt << "\"," << r.samples << "," << r.presence
          << "," << r.leakage << "," << r.color_error << "," << r.attn_iou << "\n";
}

std::string MetricsReport::summary() const {
    std::ostringstream os;
    for (const auto& r : rows) {
        os << r.family << " (\"" << r.prompt << "\", n=" << r.samples << "): "
           << "presence " << 100 * r.presence << "%  leakage " << 100 * r.leakage
           << "%  color_err " << r.color_error << "  attn_iou " << r.attn_iou << "\n";
    }
    return os.str();
}

MetricsReport eval_disentanglement(const SampleFn& sample, const ClassMapFn& class_map,
                                   const EvalTask& task, int n_samples, unsigned seed) {
    Vocabulary vocab;
    const int s = static_cast<int>(task.classes.size());
    MetricsReport report;

    struct Family {
        std::string name;
        std::string prompt;
        std::vector<int> prompted;  // concept indices (1-based)
    };
    std::vector<Family> families;
    if (s >= 2) {
        std::vector<int> all;
        for (int i = 1; i <= s; ++i) all.push_back(i);
        families.push_back({"combined",
                            template_prompt(task.classes, task.modifiers, vocab), all});
    }
    for (int i = 1; i <= s; ++i)
        families.push_back({"concept" + std::to_string(i),
                            template_prompt({task.classes[static_cast<size_t>(i - 1)]},
                                            {task.modifiers[static_cast<size_t>(i - 1)]},
                                            vocab),
                            {i}});

    unsigned sample_seed = seed;
    for (const auto& fam : families) {
        FamilyMetrics fm;
        fm.family = fam.name;
        fm.prompt = fam.prompt;
        fm.samples = n_samples;
        int present = 0, leaked = 0, color_n = 0, iou_n = 0;
        double color_acc = 0, iou_acc = 0;
        for (int k = 0; k < n_samples; ++k) {
            const Tensor img = sample(fam.prompt, sample_seed++);
            const auto dets = detect_concepts(img);
            bool all_present = true;
            for (size_t pi = 0; pi < fam.prompted.size(); ++pi) {
                const int ci = fam.prompted[pi];
                const ShapeKind want =
                    shape_from_name(task.classes[static_cast<size_t>(ci - 1)]);
                const Detection* best = nullptr;
                for (const auto& d : dets)
                    if (d.shape == want && (!best || d.area > best->area)) best = &d;
                if (!best) {
                    all_present = false;
                    continue;
                }
                if (ci - 1 < static_cast<int>(task.target_colors.size())) {
                    double err = 0;
                    for (int c = 0; c < 3; ++c)
                        err = std::max(err, std::abs(best->mean_color[static_cast<size_t>(c)] -
                                                     task.target_colors[static_cast<size_t>(ci - 1)]
                                                                       [static_cast<size_t>(c)]));
                    color_acc += err;
                    ++color_n;
                }
                if (class_map) {
                    // local concept index within this prompt
                    const Tensor m = class_map(img, fam.prompt, static_cast<int>(pi) + 1);
                    iou_acc += attention_mask_iou(m, best->mask);
                    ++iou_n;
                }
            }
            if (all_present) ++present;
            // leakage: any task shape that was NOT prompted shows up
            for (int ci = 1; ci <= s; ++ci) {
                if (std::find(fam.prompted.begin(), fam.prompted.end(), ci) !=
                    fam.prompted.end())
                    continue;
                const ShapeKind unwanted =
                    shape_from_name(task.classes[static_cast<size_t>(ci - 1)]);
                for (const auto& d : dets)
                    if (d.shape == unwanted && d.area >= 8) {
                        ++leaked;
                        goto next_sample;
                    }
            }
        next_sample:;
        }
        fm.presence = static_cast<double>(present) / n_samples;
        fm.leakage = static_cast<double>(leaked) / n_samples;
        fm.color_error = color_n ? color_acc / color_n : 0.0;
        fm.attn_iou = iou_n ? iou_acc / iou_n : 0.0;
        report.rows.push_back(fm);
    }
    return report;
}

}  // namespace disendiff
