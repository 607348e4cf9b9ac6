#include "mitodet/dataset.hpp"

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "mitodet/image_io.hpp"
#include "mitodet/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mitodet::io {

std::string split_name(Split s) {
    switch (s) {
        case Split::kTrain: return "train";
        case Split::kVal: return "val";
        case Split::kTest: return "test";
    }
    return "train";
}

Split split_from_name(const std::string& name) {
    if (name == "train") return Split::kTrain;
    if (name == "val") return Split::kVal;
    if (name == "test") return Split::kTest;
    throw std::invalid_argument("unknown split '" + name + "'");
}

const ImageInfo* DatasetManifest::find_image(const std::string& id) const {
    for (const auto& im : images) {
        if (im.id == id) return &im;
    }
    return nullptr;
}

std::vector<Annotation> DatasetManifest::annotations_for(
    const std::string& id) const {
    std::vector<Annotation> out;
    for (const auto& a : annotations) {
        if (a.image_id == id) out.push_back(a);
    }
    return out;
}

std::vector<std::string> DatasetManifest::image_ids(
    std::optional<Split> split) const {
    std::vector<std::string> out;
    for (const auto& im : images) {
        if (!split) {
            out.push_back(im.id);
            continue;
        }
        const auto it = splits.find(im.id);
        if (it != splits.end() && it->second == *split) out.push_back(im.id);
    }
    return out;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.push_back("");
    return fields;
}

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

LoadResult load_manifest(const std::string& annotation_csv,
                         const std::string& images_root) {
    LoadResult result;
    if (!fs::is_directory(images_root)) {
        throw std::runtime_error("load_manifest: images root '" + images_root +
                                 "' is not a directory");
    }
    for (const auto& entry : fs::directory_iterator(images_root)) {
        if (!entry.is_regular_file() || entry.path().extension() != ".png") continue;
        cv::Mat m = cv::imread(entry.path().string(), cv::IMREAD_COLOR);
        if (m.empty()) {
            throw std::runtime_error("load_manifest: unreadable image '" +
                                     entry.path().string() + "'");
        }
        ImageInfo info;
        info.id = entry.path().stem().string();
        info.path = entry.path().string();
        info.width = m.cols;
        info.height = m.rows;
        result.manifest.images.push_back(std::move(info));
    }
    std::sort(result.manifest.images.begin(), result.manifest.images.end(),
              [](const ImageInfo& a, const ImageInfo& b) { return a.id < b.id; });

    std::ifstream in(annotation_csv);
    if (!in) {
        throw std::runtime_error("load_manifest: cannot open '" + annotation_csv +
                                 "'");
    }
    std::string line;
    int lineno = 0;
    std::set<std::string> missing_images;
    std::set<std::string> seen_rows;
    bool header_checked = false;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty()) continue;
        if (!header_checked) {
            header_checked = true;
            if (t != "image_id,cx,cy,label") {
                throw std::runtime_error(
                    "load_manifest: expected header 'image_id,cx,cy,label', got '" +
                    t + "'");
            }
            continue;
        }
        const auto fields = split_csv_line(t);
        if (fields.size() != 4) {
            result.issues.push_back({lineno, "expected 4 fields"});
            continue;
        }
        Annotation a;
        a.image_id = trim(fields[0]);
        try {
            a.cx = std::stod(fields[1]);
            a.cy = std::stod(fields[2]);
            a.label = std::stoi(fields[3]);
        } catch (const std::exception&) {
            result.issues.push_back({lineno, "non-numeric coordinates or label"});
            continue;
        }
        const ImageInfo* im = result.manifest.find_image(a.image_id);
        if (im == nullptr) {
            missing_images.insert(a.image_id);
            continue;
        }
        if (!(a.cx >= 0 && a.cy >= 0 && a.cx < static_cast<double>(im->width) &&
              a.cy < static_cast<double>(im->height))) {
            result.issues.push_back({lineno, "center outside image bounds"});
            continue;
        }
        std::ostringstream key;
        key << a.image_id << "," << a.cx << "," << a.cy << "," << a.label;
        if (!seen_rows.insert(key.str()).second) {
            result.issues.push_back({lineno, "duplicate row (deduplicated)"});
            continue;
        }
        result.manifest.annotations.push_back(std::move(a));
    }
    if (!missing_images.empty()) {
        std::string ids;
        for (const auto& id : missing_images) ids += (ids.empty() ? "" : ", ") + id;
        throw std::runtime_error("load_manifest: annotations reference missing images: " +
                                 ids);
    }
    return result;
}

void save_manifest(const DatasetManifest& m, const std::string& path) {
    json j;
    j["images"] = json::array();
    for (const auto& im : m.images) {
        j["images"].push_back({{"id", im.id},
                               {"path", im.path},
                               {"width", im.width},
                               {"height", im.height}});
    }
    j["annotations"] = json::array();
    for (const auto& a : m.annotations) {
        j["annotations"].push_back(
            {{"image_id", a.image_id}, {"cx", a.cx}, {"cy", a.cy}, {"label", a.label}});
    }
    j["splits"] = json::object();
    for (const auto& [id, split] : m.splits) j["splits"][id] = split_name(split);
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_manifest: cannot write '" + path + "'");
    out << j.dump(2) << "\n";
}

DatasetManifest load_manifest_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_manifest_json: cannot open '" + path + "'");
    json j;
    in >> j;
    DatasetManifest m;
    for (const auto& im : j.at("images")) {
        m.images.push_back({im.at("id").get<std::string>(),
                            im.at("path").get<std::string>(),
                            im.at("width").get<std::int64_t>(),
                            im.at("height").get<std::int64_t>()});
    }
    for (const auto& a : j.at("annotations")) {
        m.annotations.push_back({a.at("image_id").get<std::string>(),
                                 a.at("cx").get<double>(), a.at("cy").get<double>(),
                                 a.at("label").get<int>()});
    }
    if (j.contains("splits")) {
        for (const auto& [id, name] : j.at("splits").items()) {
            m.splits[id] = split_from_name(name.get<std::string>());
        }
    }
    return m;
}

void save_annotation_csv(const std::vector<Annotation>& anns,
                         const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_annotation_csv: cannot write '" + path + "'");
    out << "image_id,cx,cy,label\n";
    char buf[160];
    for (const auto& a : anns) {
        std::snprintf(buf, sizeof(buf), "%s,%.10g,%.10g,%d\n", a.image_id.c_str(),
                      a.cx, a.cy, a.label);
        out << buf;
    }
}

void assign_splits(DatasetManifest& m, std::uint64_t seed, double train,
                   double val, double test) {
    if (std::abs(train + val + test - 1.0) > 1e-9) {
        throw std::invalid_argument("assign_splits: fractions must sum to 1");
    }
    const std::size_t n = m.images.size();
    m.splits.clear();
    if (n == 0) return;

    // Global targets via largest remainder.
    const double fracs[3] = {train, val, test};
    std::size_t target[3];
    double rem[3];
    std::size_t assigned = 0;
    for (int s = 0; s < 3; ++s) {
        const double ideal = fracs[s] * static_cast<double>(n);
        target[s] = static_cast<std::size_t>(std::floor(ideal + 1e-9));
        rem[s] = ideal - static_cast<double>(target[s]);
        assigned += target[s];
    }
    while (assigned < n) {
        int best = 0;
        for (int s = 1; s < 3; ++s) {
            if (rem[s] > rem[best]) best = s;
        }
        ++target[best];
        rem[best] = -1.0;
        ++assigned;
    }

    // Strata by annotation-count tercile (stable order by count, then id).
    std::map<std::string, std::size_t> counts;
    for (const auto& a : m.annotations) ++counts[a.image_id];
    std::vector<std::string> ids;
    for (const auto& im : m.images) ids.push_back(im.id);
    std::stable_sort(ids.begin(), ids.end(), [&](const auto& a, const auto& b) {
        const std::size_t ca = counts.count(a) ? counts.at(a) : 0;
        const std::size_t cb = counts.count(b) ? counts.at(b) : 0;
        if (ca != cb) return ca < cb;
        return a < b;
    });
    std::vector<std::vector<std::string>> strata;
    const std::size_t n_strata = std::min<std::size_t>(3, n);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < n_strata; ++k) {
        const std::size_t size = (n + n_strata - 1 - k) / n_strata;
        strata.emplace_back(ids.begin() + offset, ids.begin() + offset + size);
        offset += size;
    }

    // Per-stratum quotas: floor of the proportional share, then distribute the
    // remaining slots by largest fractional remainder subject to row capacity
    // and the global column targets.
    const std::size_t rows = strata.size();
    std::vector<std::array<std::size_t, 3>> quota(rows, {0, 0, 0});
    std::vector<std::size_t> col_sum(3, 0);
    struct Cell {
        double rem;
        std::size_t row;
        int col;
    };
    std::vector<Cell> cells;
    for (std::size_t k = 0; k < rows; ++k) {
        for (int s = 0; s < 3; ++s) {
            const double ideal = fracs[s] * static_cast<double>(strata[k].size());
            quota[k][s] = static_cast<std::size_t>(std::floor(ideal + 1e-9));
            col_sum[s] += quota[k][s];
            cells.push_back({ideal - static_cast<double>(quota[k][s]), k, s});
        }
    }
    std::stable_sort(cells.begin(), cells.end(), [](const Cell& a, const Cell& b) {
        if (a.rem != b.rem) return a.rem > b.rem;
        if (a.row != b.row) return a.row < b.row;
        return a.col < b.col;
    });
    auto row_fill = [&](std::size_t k) {
        return quota[k][0] + quota[k][1] + quota[k][2];
    };
    bool progress = true;
    while (progress) {
        progress = false;
        for (const auto& c : cells) {
            if (row_fill(c.row) >= strata[c.row].size()) continue;
            if (col_sum[c.col] >= target[c.col]) continue;
            ++quota[c.row][c.col];
            ++col_sum[c.col];
            progress = true;
        }
    }

    // Shuffle within each stratum and hand out train / val / test runs.
    for (std::size_t k = 0; k < rows; ++k) {
        auto& bucket = strata[k];
        Rng rng = child_rng(seed, 1000 + k);
        for (std::size_t i = bucket.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(
                uniform_int(rng, 0, static_cast<std::int64_t>(i) - 1));
            std::swap(bucket[i - 1], bucket[j]);
        }
        std::size_t pos = 0;
        const Split order[3] = {Split::kTrain, Split::kVal, Split::kTest};
        for (int s = 0; s < 3; ++s) {
            for (std::size_t i = 0; i < quota[k][s]; ++i) {
                m.splits[bucket[pos++]] = order[s];
            }
        }
    }
}

namespace {

// Alpha-composites an anisotropic gaussian spot onto the image.
void paint_spot(torch::Tensor& img, double cx, double cy, double sx, double sy,
                double angle, const std::array<double, 3>& color,
                double alpha_max) {
    const auto h = img.size(1);
    const auto w = img.size(2);
    const double extent = 3.0 * std::max(sx, sy);
    const auto x0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(cx - extent));
    const auto x1 = std::min<std::int64_t>(w - 1, static_cast<std::int64_t>(cx + extent));
    const auto y0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(cy - extent));
    const auto y1 = std::min<std::int64_t>(h - 1, static_cast<std::int64_t>(cy + extent));
    const double ca = std::cos(angle), sa = std::sin(angle);
    auto acc = img.accessor<float, 3>();
    for (std::int64_t y = y0; y <= y1; ++y) {
        for (std::int64_t x = x0; x <= x1; ++x) {
            const double dx = static_cast<double>(x) - cx;
            const double dy = static_cast<double>(y) - cy;
            const double u = ca * dx + sa * dy;
            const double v = -sa * dx + ca * dy;
            const double a =
                alpha_max * std::exp(-0.5 * (u * u / (sx * sx) + v * v / (sy * sy)));
            if (a < 1e-3) continue;
            for (int c = 0; c < 3; ++c) {
                acc[c][y][x] = static_cast<float>(
                    (1.0 - a) * acc[c][y][x] + a * color[static_cast<std::size_t>(c)]);
            }
        }
    }
}

// Alpha-composites an annulus (hollow ring) onto the image.
void paint_ring(torch::Tensor& img, double cx, double cy, double radius,
                double thickness, const std::array<double, 3>& color,
                double alpha_max) {
    const auto h = img.size(1);
    const auto w = img.size(2);
    const double extent = radius + 3.0 * thickness;
    const auto x0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(cx - extent));
    const auto x1 = std::min<std::int64_t>(w - 1, static_cast<std::int64_t>(cx + extent));
    const auto y0 = std::max<std::int64_t>(0, static_cast<std::int64_t>(cy - extent));
    const auto y1 = std::min<std::int64_t>(h - 1, static_cast<std::int64_t>(cy + extent));
    auto acc = img.accessor<float, 3>();
    for (std::int64_t y = y0; y <= y1; ++y) {
        for (std::int64_t x = x0; x <= x1; ++x) {
            const double dx = static_cast<double>(x) - cx;
            const double dy = static_cast<double>(y) - cy;
            const double r = std::sqrt(dx * dx + dy * dy);
            const double d = (r - radius) / thickness;
            const double a = alpha_max * std::exp(-0.5 * d * d);
            if (a < 1e-3) continue;
            for (int c = 0; c < 3; ++c) {
                acc[c][y][x] = static_cast<float>(
                    (1.0 - a) * acc[c][y][x] + a * color[static_cast<std::size_t>(c)]);
            }
        }
    }
}

torch::Tensor render_background(std::int64_t size, Rng& rng) {
    // Base histology-pink plus a smooth low-frequency field and fine speckle.
    auto img = torch::empty({3, size, size}, torch::kFloat32);
    const double base[3] = {0.87, 0.76, 0.83};

    const std::int64_t coarse = std::max<std::int64_t>(4, size / 64);
    auto field = torch::empty({1, 3, coarse, coarse}, torch::kFloat32);
    {
        auto f = field.accessor<float, 4>();
        for (int c = 0; c < 3; ++c) {
            for (std::int64_t i = 0; i < coarse; ++i) {
                for (std::int64_t j = 0; j < coarse; ++j) {
                    f[0][c][i][j] = static_cast<float>(0.035 * normal(rng));
                }
            }
        }
    }
    namespace F = torch::nn::functional;
    auto low = F::interpolate(field, F::InterpolateFuncOptions()
                                         .size(std::vector<std::int64_t>{size, size})
                                         .mode(torch::kBilinear)
                                         .align_corners(true))
                   .squeeze(0);

    auto acc = img.accessor<float, 3>();
    auto lacc = low.accessor<float, 3>();
    for (std::int64_t y = 0; y < size; ++y) {
        for (std::int64_t x = 0; x < size; ++x) {
            const auto speckle = static_cast<float>(uniform(rng, -0.02, 0.02));
            for (int c = 0; c < 3; ++c) {
                acc[c][y][x] = static_cast<float>(base[c]) + lacc[c][y][x] + speckle;
            }
        }
    }

    // Faint nuclei so the background is not uniformly smooth.
    const auto n_nuclei = static_cast<std::int64_t>(150.0 * size * size / (1024.0 * 1024.0));
    for (std::int64_t i = 0; i < n_nuclei; ++i) {
        const double cx = uniform(rng, 8.0, static_cast<double>(size) - 8.0);
        const double cy = uniform(rng, 8.0, static_cast<double>(size) - 8.0);
        const double r = uniform(rng, 2.5, 6.0);
        paint_spot(img, cx, cy, r, r * uniform(rng, 0.7, 1.0), uniform(rng, 0.0, 3.14),
                   {0.72, 0.55, 0.72}, uniform(rng, 0.15, 0.3));
    }
    return img.clamp_(0.0, 1.0);
}

}  // namespace

SyntheticDataset generate_synthetic(const SyntheticSpec& spec) {
    if (spec.size < 512) {
        throw std::invalid_argument("generate_synthetic: size must be >= 512");
    }
    SyntheticDataset data;
    for (std::int64_t i = 0; i < spec.n_images; ++i) {
        Rng rng = child_rng(spec.seed, static_cast<std::uint64_t>(i));
        auto img = render_background(spec.size, rng);

        char name[32];
        std::snprintf(name, sizeof(name), "synth_%03lld", static_cast<long long>(i));
        const std::string image_id = name;

        struct Placed {
            double cx, cy, r;
        };
        std::vector<Placed> placed;
        auto try_place = [&](double radius, double margin, double& cx, double& cy) {
            for (int attempt = 0; attempt < 100; ++attempt) {
                cx = uniform(rng, margin, static_cast<double>(spec.size) - margin);
                cy = uniform(rng, margin, static_cast<double>(spec.size) - margin);
                bool ok = true;
                for (const auto& p : placed) {
                    const double dx = p.cx - cx, dy = p.cy - cy;
                    if (std::sqrt(dx * dx + dy * dy) < p.r + radius + 12.0) {
                        ok = false;
                        break;
                    }
                }
                if (ok) {
                    placed.push_back({cx, cy, radius});
                    return true;
                }
            }
            return false;
        };

        for (std::int64_t b = 0; b < spec.blobs_per_image; ++b) {
            const double d = uniform(rng, 10.0, 30.0);
            const double margin = std::max(15.0, 0.5 * d + 2.0);
            double cx = 0, cy = 0;
            if (!try_place(0.5 * d, margin, cx, cy)) {
                data.warnings.push_back(image_id + ": placed fewer blobs than requested");
                break;
            }
            const double sigma = d / 4.0;
            const std::array<double, 3> color = {uniform(rng, 0.28, 0.36),
                                                 uniform(rng, 0.14, 0.22),
                                                 uniform(rng, 0.38, 0.48)};
            paint_spot(img, cx, cy, sigma * uniform(rng, 0.85, 1.15),
                       sigma * uniform(rng, 0.85, 1.15), uniform(rng, 0.0, 3.14159),
                       color, uniform(rng, 0.8, 0.95));
            data.annotations.push_back({image_id, cx, cy, 0});
        }

        for (std::int64_t k = 0; k < spec.distractors_per_image; ++k) {
            double cx = 0, cy = 0;
            if (k % 2 == 0) {
                const double radius = uniform(rng, 6.0, 13.0);
                if (!try_place(radius + 4.0, radius + 18.0, cx, cy)) continue;
                paint_ring(img, cx, cy, radius, uniform(rng, 1.5, 2.5),
                           {uniform(rng, 0.3, 0.38), uniform(rng, 0.16, 0.24),
                            uniform(rng, 0.4, 0.5)},
                           uniform(rng, 0.7, 0.9));
            } else {
                const double smajor = uniform(rng, 8.0, 14.0);
                const double sminor = smajor / uniform(rng, 3.0, 4.5);
                if (!try_place(smajor, smajor + 18.0, cx, cy)) continue;
                paint_spot(img, cx, cy, smajor, sminor, uniform(rng, 0.0, 3.14159),
                           {uniform(rng, 0.32, 0.4), uniform(rng, 0.18, 0.26),
                            uniform(rng, 0.42, 0.52)},
                           uniform(rng, 0.7, 0.85));
            }
        }

        img.clamp_(0.0, 1.0);
        data.pixels.push_back(std::move(img));
        data.images.push_back({image_id, "", spec.size, spec.size});
    }
    return data;
}

DatasetManifest write_synthetic(const SyntheticDataset& data,
                                const std::string& out_dir) {
    fs::create_directories(out_dir);
    fs::create_directories(fs::path(out_dir) / "images");
    DatasetManifest m;
    for (std::size_t i = 0; i < data.images.size(); ++i) {
        ImageInfo info = data.images[i];
        const auto path = fs::path(out_dir) / "images" / (info.id + ".png");
        write_image(path.string(), data.pixels[i]);
        info.path = path.string();
        m.images.push_back(std::move(info));
    }
    m.annotations = data.annotations;
    save_annotation_csv(m.annotations, (fs::path(out_dir) / "annotations.csv").string());
    save_manifest(m, (fs::path(out_dir) / "manifest.json").string());
    return m;
}

}  // namespace mitodet::io
