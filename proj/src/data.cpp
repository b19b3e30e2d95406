#include "gpunet/data.hpp"

#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

namespace gpunet {

namespace fs = std::filesystem;

// --- netpbm codec ----------------------------------------------------------

namespace {

class HeaderReader {
public:
    explicit HeaderReader(const std::string& bytes) : b_(bytes) {}

    std::size_t number(const char* what)
    {
        skip_space_and_comments();
        if (pos_ >= b_.size())
            throw ImageError(ImageError::Kind::truncated, std::string("image header truncated before ") + what);
        if (!std::isdigit(static_cast<unsigned char>(b_[pos_])))
            throw ImageError(ImageError::Kind::bad_header, std::string("malformed ") + what + " in image header");
        std::size_t v = 0;
        while (pos_ < b_.size() && std::isdigit(static_cast<unsigned char>(b_[pos_]))) {
            v = v * 10 + static_cast<std::size_t>(b_[pos_] - '0');
            if (v > (1u << 24))
                throw ImageError(ImageError::Kind::bad_header, std::string(what) + " too large");
            ++pos_;
        }
        return v;
    }

    // Exactly one whitespace byte separates maxval from the raster.
    std::size_t raster_offset()
    {
        if (pos_ >= b_.size() || !std::isspace(static_cast<unsigned char>(b_[pos_])))
            throw ImageError(ImageError::Kind::truncated, "image header not terminated");
        return pos_ + 1;
    }

private:
    void skip_space_and_comments()
    {
        while (pos_ < b_.size()) {
            if (std::isspace(static_cast<unsigned char>(b_[pos_]))) {
                ++pos_;
            } else if (b_[pos_] == '#') {
                while (pos_ < b_.size() && b_[pos_] != '\n')
                    ++pos_;
            } else {
                break;
            }
        }
    }

    const std::string& b_;
    std::size_t pos_ = 2;
};

std::string read_file(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw ImageError(ImageError::Kind::io, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

Tensor4<float> decode_image(const std::string& bytes)
{
    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
        throw ImageError(ImageError::Kind::bad_magic, "not a binary PGM/PPM (expected P5 or P6)");
    const std::size_t channels = bytes[1] == '5' ? 1 : 3;
    HeaderReader hr(bytes);
    const std::size_t width = hr.number("width");
    const std::size_t height = hr.number("height");
    const std::size_t maxval = hr.number("maxval");
    if (maxval != 255)
        throw ImageError(ImageError::Kind::bad_maxval, "unsupported maxval " + std::to_string(maxval) + " (need 255)");
    if (width == 0 || height == 0)
        throw ImageError(ImageError::Kind::bad_header, "image has zero extent");
    const std::size_t off = hr.raster_offset();
    const std::size_t need = width * height * channels;
    if (bytes.size() < off + need)
        throw ImageError(ImageError::Kind::truncated, "image payload truncated: need " + std::to_string(need) +
                                                          " bytes, have " + std::to_string(bytes.size() - off));
    Tensor4<float> t(Shape4{1, channels, height, width});
    const auto* raster = reinterpret_cast<const unsigned char*>(bytes.data() + off);
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x)
            for (std::size_t c = 0; c < channels; ++c)
                t.at(0, c, y, x) = static_cast<float>(raster[(y * width + x) * channels + c]) / 255.0f;
    return t;
}

Tensor4<float> load_image(const fs::path& path)
{
    return decode_image(read_file(path));
}

std::string encode_image(const Tensor4<float>& t)
{
    const auto& s = t.shape();
    if (s.n == 0 || (s.c != 1 && s.c != 3))
        throw ShapeError("save_image: need 1 or 3 channels, got shape " + to_string(s));
    std::string out = (s.c == 1 ? "P5\n" : "P6\n") + std::to_string(s.w) + " " + std::to_string(s.h) + "\n255\n";
    const std::size_t header = out.size();
    out.resize(header + s.h * s.w * s.c);
    for (std::size_t y = 0; y < s.h; ++y)
        for (std::size_t x = 0; x < s.w; ++x)
            for (std::size_t c = 0; c < s.c; ++c) {
                const float v = std::clamp(t.at(0, c, y, x), 0.0f, 1.0f);
                out[header + (y * s.w + x) * s.c + c] = static_cast<char>(static_cast<unsigned char>(std::lround(255.0f * v)));
            }
    return out;
}

void save_image(const Tensor4<float>& t, const fs::path& path)
{
    const std::string bytes = encode_image(t);
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw ImageError(ImageError::Kind::io, "cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw ImageError(ImageError::Kind::io, "write failed for " + path.string());
}

// --- resizing --------------------------------------------------------------

Tensor4<float> resize_bilinear(const Tensor4<float>& t, std::size_t out_h, std::size_t out_w)
{
    if (out_h == 0 || out_w == 0)
        throw ShapeError("resize: target dims must be positive");
    const auto& s = t.shape();
    if (s.h == out_h && s.w == out_w)
        return t;
    struct Tap {
        std::size_t i0, i1;
        float frac;
    };
    auto taps = [](std::size_t in, std::size_t out) {
        std::vector<Tap> v(out);
        const double scale = static_cast<double>(in) / static_cast<double>(out);
        for (std::size_t o = 0; o < out; ++o) {
            double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
            if (src < 0.0)
                src = 0.0;
            std::size_t i0 = static_cast<std::size_t>(src);
            if (i0 > in - 1)
                i0 = in - 1;
            const std::size_t i1 = std::min(i0 + 1, in - 1);
            v[o] = {i0, i1, static_cast<float>(src - static_cast<double>(i0))};
        }
        return v;
    };
    const auto ty = taps(s.h, out_h);
    const auto tx = taps(s.w, out_w);
    Tensor4<float> r(Shape4{s.n, s.c, out_h, out_w});
    for (std::size_t b = 0; b < s.n; ++b)
        for (std::size_t c = 0; c < s.c; ++c) {
            const float* p = t.plane(b, c);
            float* q = r.plane(b, c);
            for (std::size_t y = 0; y < out_h; ++y) {
                const auto& a = ty[y];
                for (std::size_t x = 0; x < out_w; ++x) {
                    const auto& e = tx[x];
                    const float top = p[a.i0 * s.w + e.i0] * (1.0f - e.frac) + p[a.i0 * s.w + e.i1] * e.frac;
                    const float bot = p[a.i1 * s.w + e.i0] * (1.0f - e.frac) + p[a.i1 * s.w + e.i1] * e.frac;
                    q[y * out_w + x] = top * (1.0f - a.frac) + bot * a.frac;
                }
            }
        }
    return r;
}

Tensor4<float> resize_mask(const Tensor4<float>& mask, std::size_t out_h, std::size_t out_w)
{
    Tensor4<float> r = resize_bilinear(mask, out_h, out_w);
    for (auto& v : r.span())
        v = v >= 0.5f ? 1.0f : 0.0f;
    return r;
}

// --- splits ----------------------------------------------------------------

namespace {

std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t n)
{
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v;
    do {
        v = rng();
    } while (v >= limit);
    return v % n;
}

double unit(std::mt19937_64& rng)
{
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

double uniform(std::mt19937_64& rng, double lo, double hi)
{
    return lo + (hi - lo) * unit(rng);
}

// Box-Muller; avoids the implementation-defined std::normal_distribution.
double gaussian(std::mt19937_64& rng)
{
    const double u1 = 1.0 - unit(rng);
    const double u2 = unit(rng);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace

void SplitSpec::validate() const
{
    if (train < 0 || val < 0 || test < 0)
        throw ConfigError("split fractions must be non-negative");
    if (std::abs(train + val + test - 1.0) > 1e-9)
        throw ConfigError("split fractions must sum to 1");
}

Split split_dataset(const std::vector<std::string>& ids, const SplitSpec& spec)
{
    spec.validate();
    if (ids.empty())
        throw ValueError("cannot split an empty id list");
    std::vector<std::string> order = ids;
    std::mt19937_64 rng(spec.seed);
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[bounded(rng, i)]);
    const std::size_t n = order.size();
    const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * spec.val));
    const auto n_test = std::min(n - n_val, static_cast<std::size_t>(std::llround(static_cast<double>(n) * spec.test)));
    const std::size_t n_train = n - n_val - n_test;
    Split s;
    s.train.assign(order.begin(), order.begin() + static_cast<long>(n_train));
    s.val.assign(order.begin() + static_cast<long>(n_train), order.begin() + static_cast<long>(n_train + n_val));
    s.test.assign(order.begin() + static_cast<long>(n_train + n_val), order.end());
    return s;
}

// --- synthetic shapes ------------------------------------------------------

namespace {

struct Shape2D {
    bool ellipse;
    double cy, cx, ry, rx, angle;

    bool contains(double y, double x) const
    {
        const double dy = y - cy, dx = x - cx;
        const double c = std::cos(angle), s = std::sin(angle);
        const double u = (c * dx + s * dy) / rx;
        const double v = (-s * dx + c * dy) / ry;
        if (ellipse)
            return u * u + v * v <= 1.0;
        return std::abs(u) <= 1.0 && std::abs(v) <= 1.0;
    }
};

constexpr int kSupersample = 4;

}  // namespace

std::vector<Sample> synth_shapes(std::size_t count, std::size_t h, std::size_t w, std::uint64_t seed)
{
    if (h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0)
        throw ShapeError("synthetic images need spatial dims divisible by 16");
    std::mt19937_64 rng(seed);
    const double extent = static_cast<double>(std::min(h, w));
    std::vector<Sample> out;
    out.reserve(count);
    std::vector<float> coverage(h * w);
    for (std::size_t idx = 0; idx < count; ++idx) {
        double fraction = 0.0;
        do {
            const std::size_t n_shapes = 1 + bounded(rng, 3);
            std::vector<Shape2D> shapes;
            for (std::size_t k = 0; k < n_shapes; ++k)
                shapes.push_back({unit(rng) < 0.5, uniform(rng, 0.15, 0.85) * static_cast<double>(h),
                                  uniform(rng, 0.15, 0.85) * static_cast<double>(w), uniform(rng, 0.08, 0.3) * extent,
                                  uniform(rng, 0.08, 0.3) * extent, uniform(rng, 0.0, std::numbers::pi)});
            std::size_t fg = 0;
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    int hits = 0;
                    for (int sy = 0; sy < kSupersample; ++sy)
                        for (int sx = 0; sx < kSupersample; ++sx) {
                            const double py = static_cast<double>(y) + (sy + 0.5) / kSupersample;
                            const double px = static_cast<double>(x) + (sx + 0.5) / kSupersample;
                            for (const auto& s : shapes)
                                if (s.contains(py, px)) {
                                    ++hits;
                                    break;
                                }
                        }
                    const float cov = static_cast<float>(hits) / static_cast<float>(kSupersample * kSupersample);
                    coverage[y * w + x] = cov;
                    fg += cov >= 0.5f ? 1 : 0;
                }
            fraction = static_cast<double>(fg) / static_cast<double>(h * w);
        } while (fraction < 0.05 || fraction > 0.6);

        const double fg_level = uniform(rng, 0.6, 0.8);
        const double bg_level = uniform(rng, 0.2, 0.35);
        const double fy = uniform(rng, 0.05, 0.2), fx = uniform(rng, 0.05, 0.2);
        const double py = uniform(rng, 0.0, 2 * std::numbers::pi), px = uniform(rng, 0.0, 2 * std::numbers::pi);
        Sample s{Tensor4<float>(Shape4{1, 1, h, w}), Tensor4<float>(Shape4{1, 1, h, w}), "synth" + std::to_string(idx)};
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const double cov = coverage[y * w + x];
                const double texture =
                    0.08 * std::sin(fy * static_cast<double>(y) + py) * std::cos(fx * static_cast<double>(x) + px);
                const double v = (bg_level + texture) * (1.0 - cov) + fg_level * cov + 0.1 * gaussian(rng);
                s.image.at(0, 0, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
                s.mask.at(0, 0, y, x) = cov >= 0.5 ? 1.0f : 0.0f;
            }
        out.push_back(std::move(s));
    }
    return out;
}

// --- dataset directories ---------------------------------------------------

std::vector<Sample> load_dataset_dir(const fs::path& dir)
{
    const fs::path manifest = dir / "manifest.txt";
    std::ifstream in(manifest);
    if (!in)
        throw ImageError(ImageError::Kind::io, "dataset manifest not found: " + manifest.string());
    std::vector<Sample> samples;
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back())))
            line.pop_back();
        if (line.empty())
            continue;
        fs::path image = dir / "images" / (line + ".pgm");
        if (!fs::exists(image))
            image = dir / "images" / (line + ".ppm");
        Sample s{load_image(image), load_image(dir / "masks" / (line + ".pgm")), line};
        if (s.mask.shape().c != 1)
            throw ShapeError("mask " + line + " must be single-channel");
        if (s.mask.shape().h != s.image.shape().h || s.mask.shape().w != s.image.shape().w)
            throw ShapeError("image and mask sizes differ for " + line);
        for (auto& v : s.mask.span())
            v = v >= 0.5f ? 1.0f : 0.0f;
        samples.push_back(std::move(s));
    }
    if (samples.empty())
        throw ValueError("dataset manifest lists no ids: " + manifest.string());
    return samples;
}

void save_dataset_dir(const std::vector<Sample>& samples, const fs::path& dir)
{
    fs::create_directories(dir / "images");
    fs::create_directories(dir / "masks");
    std::ofstream manifest(dir / "manifest.txt");
    for (const auto& s : samples) {
        save_image(s.image, dir / "images" / (s.id + (s.image.shape().c == 1 ? ".pgm" : ".ppm")));
        save_image(s.mask, dir / "masks" / (s.id + ".pgm"));
        manifest << s.id << "\n";
    }
}

// --- feature visualization ---------------------------------------------------

Tensor4<float> normalize_map(const Tensor4<float>& map)
{
    if (map.shape().n != 1 || map.shape().c != 1 || map.empty())
        throw ShapeError("normalize_map: expected a non-empty (1,1,h,w) map, got " + to_string(map.shape()));
    const auto [lo, hi] = std::minmax_element(map.data(), map.data() + map.size());
    Tensor4<float> out(map.shape());
    if (*hi == *lo) {
        out.fill(128.0f / 255.0f);
        return out;
    }
    const double range = static_cast<double>(*hi) - static_cast<double>(*lo);
    for (std::size_t i = 0; i < map.size(); ++i)
        out[i] = static_cast<float>((static_cast<double>(map[i]) - *lo) / range);
    return out;
}

Tensor4<float> contact_sheet(const std::vector<Tensor4<float>>& maps, std::size_t gap)
{
    if (maps.empty())
        throw ValueError("contact_sheet: no maps");
    const Shape4 s = maps.front().shape();
    const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(maps.size()))));
    const std::size_t rows = (maps.size() + cols - 1) / cols;
    Tensor4<float> sheet(Shape4{1, 1, rows * s.h + (rows - 1) * gap, cols * s.w + (cols - 1) * gap});
    for (std::size_t k = 0; k < maps.size(); ++k) {
        if (maps[k].shape() != s || s.n != 1 || s.c != 1)
            throw ShapeError("contact_sheet: maps must share one (1,1,h,w) shape");
        const std::size_t y0 = (k / cols) * (s.h + gap), x0 = (k % cols) * (s.w + gap);
        for (std::size_t y = 0; y < s.h; ++y)
            std::copy_n(maps[k].data() + y * s.w, s.w, sheet.data() + (y0 + y) * sheet.shape().w + x0);
    }
    return sheet;
}

std::vector<Sample> select_ids(const std::vector<Sample>& samples, const std::vector<std::string>& ids)
{
    std::vector<Sample> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
        auto it = std::find_if(samples.begin(), samples.end(), [&](const Sample& s) { return s.id == id; });
        if (it == samples.end())
            throw ValueError("unknown sample id " + id);
        out.push_back(*it);
    }
    return out;
}

}  // namespace gpunet
