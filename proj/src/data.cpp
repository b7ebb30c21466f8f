#include "nwlab/data.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace nwlab {

// --- glyphs -------------------------------------------------------------------

GlyphBank load_idx_images(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open IDX file " + path);
    auto read_be32 = [&]() {
        unsigned char b[4];
        is.read(reinterpret_cast<char*>(b), 4);
        if (!is) throw std::runtime_error("IDX file truncated: " + path);
        return (static_cast<uint32_t>(b[0]) << 24) | (static_cast<uint32_t>(b[1]) << 16) |
               (static_cast<uint32_t>(b[2]) << 8) | static_cast<uint32_t>(b[3]);
    };
    const uint32_t magic = read_be32();
    if (magic != 0x00000803)
        throw std::runtime_error("not an IDX image file (magic mismatch): " + path);
    const uint32_t count = read_be32();
    const uint32_t rows = read_be32();
    const uint32_t cols = read_be32();
    GlyphBank bank;
    bank.gh = static_cast<int>(rows);
    bank.gw = static_cast<int>(cols);
    bank.glyphs.reserve(count);
    std::vector<uint8_t> raw(static_cast<size_t>(rows) * cols);
    for (uint32_t i = 0; i < count; ++i) {
        is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
        if (!is) throw std::runtime_error("IDX file truncated in image payload: " + path);
        std::vector<float> g(raw.size());
        for (size_t p = 0; p < raw.size(); ++p) g[p] = static_cast<float>(raw[p]) / 255.0f;
        bank.glyphs.push_back(std::move(g));
    }
    return bank;
}

namespace {

// 5x7 seed bitmaps, smoothed and upscaled to 28x28
const char* kDigitRows[10][7] = {
    {"01110", "10001", "10011", "10101", "11001", "10001", "01110"}, // 0
    {"00100", "01100", "00100", "00100", "00100", "00100", "01110"}, // 1
    {"01110", "10001", "00001", "00110", "01000", "10000", "11111"}, // 2
    {"11110", "00001", "00001", "01110", "00001", "00001", "11110"}, // 3
    {"00010", "00110", "01010", "10010", "11111", "00010", "00010"}, // 4
    {"11111", "10000", "11110", "00001", "00001", "10001", "01110"}, // 5
    {"00110", "01000", "10000", "11110", "10001", "10001", "01110"}, // 6
    {"11111", "00001", "00010", "00100", "01000", "01000", "01000"}, // 7
    {"01110", "10001", "10001", "01110", "10001", "10001", "01110"}, // 8
    {"01110", "10001", "10001", "01111", "00001", "00010", "01100"}, // 9
};

} // namespace

GlyphBank builtin_glyphs() {
    GlyphBank bank;
    bank.gh = bank.gw = 28;
    for (int d = 0; d < 10; ++d) {
        std::vector<float> g(28 * 28, 0.0f);
        // bilinear upsample of the 5x7 bitmap into the central 20x28 region
        for (int y = 0; y < 28; ++y) {
            const double sy = (y + 0.5) / 28.0 * 7.0 - 0.5;
            const int y0 = static_cast<int>(std::floor(sy));
            const double fy = sy - y0;
            for (int x = 0; x < 28; ++x) {
                const double sx = (x + 0.5) / 28.0 * 5.0 - 0.5;
                const int x0 = static_cast<int>(std::floor(sx));
                const double fx = sx - x0;
                auto bit = [&](int yy, int xx) -> double {
                    if (yy < 0 || yy >= 7 || xx < 0 || xx >= 5) return 0.0;
                    return kDigitRows[d][yy][xx] == '1' ? 1.0 : 0.0;
                };
                const double v = bit(y0, x0) * (1 - fy) * (1 - fx) + bit(y0, x0 + 1) * (1 - fy) * fx +
                                 bit(y0 + 1, x0) * fy * (1 - fx) + bit(y0 + 1, x0 + 1) * fy * fx;
                g[static_cast<size_t>(y) * 28 + x] = static_cast<float>(v);
            }
        }
        bank.glyphs.push_back(std::move(g));
    }
    return bank;
}

// --- MovingMNIST++ ---------------------------------------------------------------

DigitMotion sample_motion(const MovingMnistPPConfig& cfg, int bank_size, Rng& rng) {
    DigitMotion m;
    m.glyph = static_cast<int>(rng.uniform_index(static_cast<uint64_t>(bank_size)));
    const double margin =
        std::min(0.5 * (cfg.frame_h - 1), 0.5 * 28.0 * cfg.glyph_scale);
    m.pos_y = rng.uniform(margin, cfg.frame_h - 1 - margin);
    m.pos_x = rng.uniform(margin, cfg.frame_w - 1 - margin);
    const double angle = rng.uniform(0.0, 6.283185307179586);
    const double speed = rng.uniform(cfg.velocity_lo, cfg.velocity_hi);
    m.vel_y = speed * std::sin(angle);
    m.vel_x = speed * std::cos(angle);
    m.scale_rate = rng.uniform(cfg.scale_lo, cfg.scale_hi);
    m.rotation_rate = rng.uniform(cfg.rotation_lo, cfg.rotation_hi);
    m.illumination_rate = rng.uniform(cfg.illumination_lo, cfg.illumination_hi);
    return m;
}

namespace {

void render_digit(std::vector<float>& frame, int fh, int fw, const GlyphBank& bank,
                  const DigitMotion& m, double scale, double theta, double illum) {
    const auto& glyph = bank.glyphs[static_cast<size_t>(m.glyph)];
    const double sc = scale; // frame pixels per glyph pixel
    const double half = 0.5 * std::max(bank.gh, bank.gw) * sc *
                        (std::abs(std::cos(theta)) + std::abs(std::sin(theta)));
    const double ct = std::cos(theta), st = std::sin(theta);
    const double cgy = 0.5 * (bank.gh - 1), cgx = 0.5 * (bank.gw - 1);
    const int y0 = std::max(0, static_cast<int>(std::floor(m.pos_y - half)) - 1);
    const int y1 = std::min(fh - 1, static_cast<int>(std::ceil(m.pos_y + half)) + 1);
    const int x0 = std::max(0, static_cast<int>(std::floor(m.pos_x - half)) - 1);
    const int x1 = std::min(fw - 1, static_cast<int>(std::ceil(m.pos_x + half)) + 1);
    for (int y = y0; y <= y1; ++y) {
        const double dy = y - m.pos_y;
        for (int x = x0; x <= x1; ++x) {
            const double dx = x - m.pos_x;
            // rotate by -theta and unscale into glyph coordinates
            const double gx = (ct * dx + st * dy) / sc + cgx;
            const double gy = (-st * dx + ct * dy) / sc + cgy;
            const int ix = static_cast<int>(std::floor(gx));
            const int iy = static_cast<int>(std::floor(gy));
            if (ix < -1 || ix >= bank.gw || iy < -1 || iy >= bank.gh) continue;
            const double fx2 = gx - ix, fy2 = gy - iy;
            auto tap = [&](int yy, int xx) -> double {
                if (yy < 0 || yy >= bank.gh || xx < 0 || xx >= bank.gw) return 0.0;
                return glyph[static_cast<size_t>(yy) * bank.gw + xx];
            };
            const double v = tap(iy, ix) * (1 - fy2) * (1 - fx2) + tap(iy, ix + 1) * (1 - fy2) * fx2 +
                             tap(iy + 1, ix) * fy2 * (1 - fx2) + tap(iy + 1, ix + 1) * fy2 * fx2;
            const float lit = static_cast<float>(v * illum);
            float& dst = frame[static_cast<size_t>(y) * fw + x];
            dst = std::max(dst, lit);
        }
    }
}

// specular reflection keeping the digit's bounding box inside the frame
void bounce(double& p, double& v, double margin, double hi) {
    const double lo = margin;
    const double cap = hi - margin;
    if (cap <= lo) { // degenerate: digit larger than the frame
        p = 0.5 * hi;
        return;
    }
    for (int guard = 0; guard < 4 && (p < lo || p > cap); ++guard) {
        if (p < lo) {
            p = 2 * lo - p;
            v = -v;
        } else if (p > cap) {
            p = 2 * cap - p;
            v = -v;
        }
    }
    p = std::min(std::max(p, lo), cap);
}

} // namespace

SequenceSample generate_sequence(const MovingMnistPPConfig& cfg, const GlyphBank& bank,
                                 uint64_t seed) {
    if (bank.glyphs.empty()) throw std::invalid_argument("glyph bank is empty");
    SequenceSample s;
    s.h = cfg.frame_h;
    s.w = cfg.frame_w;
    s.len = cfg.seq_len;
    s.seed = seed;
    s.frames.assign(static_cast<size_t>(cfg.seq_len) * cfg.frame_h * cfg.frame_w, 0);
    s.mask.assign(s.frames.size(), 1);

    Rng rng(seed);
    std::vector<DigitMotion> motions;
    for (int d = 0; d < cfg.digits; ++d)
        motions.push_back(sample_motion(cfg, static_cast<int>(bank.glyphs.size()), rng));

    std::vector<float> buf(static_cast<size_t>(cfg.frame_h) * cfg.frame_w);
    for (int t = 0; t < cfg.seq_len; ++t) {
        std::fill(buf.begin(), buf.end(), 0.0f);
        for (auto& m : motions) {
            const double scale = cfg.glyph_scale * std::pow(m.scale_rate, t);
            const double theta = m.rotation_rate * t;
            const double illum = std::pow(m.illumination_rate, t);
            render_digit(buf, cfg.frame_h, cfg.frame_w, bank, m, scale, theta, illum);
        }
        uint8_t* dst = s.frames.data() + static_cast<int64_t>(t) * s.frame_size();
        for (size_t i = 0; i < buf.size(); ++i) {
            const float v = std::min(1.0f, std::max(0.0f, buf[i]));
            dst[i] = static_cast<uint8_t>(std::lround(v * 255.0f));
        }
        // advance positions for the next frame
        for (auto& m : motions) {
            const double nscale = cfg.glyph_scale * std::pow(m.scale_rate, t + 1);
            const double ntheta = m.rotation_rate * (t + 1);
            const double half = 0.5 * std::max(bank.gh, bank.gw) * nscale *
                                (std::abs(std::cos(ntheta)) + std::abs(std::sin(ntheta)));
            m.pos_y += m.vel_y;
            m.pos_x += m.vel_x;
            bounce(m.pos_y, m.vel_y, half, cfg.frame_h - 1);
            bounce(m.pos_x, m.vel_x, half, cfg.frame_w - 1);
        }
    }
    return s;
}

Dataset generate_mnistpp_dataset(const MovingMnistPPConfig& cfg, const GlyphBank& bank,
                                 uint64_t root_seed, int count) {
    Dataset d;
    d.h = cfg.frame_h;
    d.w = cfg.frame_w;
    d.seq_len = cfg.seq_len;
    d.records.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        SequenceSample s = generate_sequence(cfg, bank, derive_seed(root_seed, static_cast<uint64_t>(i)));
        s.episode_flag = 1;
        d.records.push_back(std::move(s));
    }
    return d;
}

// --- NWD1 persistence --------------------------------------------------------------

namespace {

constexpr char kDataMagic[4] = {'N', 'W', 'D', '1'};

class ByteWriter {
public:
    explicit ByteWriter(const std::string& path) : os_(path, std::ios::binary), path_(path) {
        if (!os_) throw std::runtime_error("cannot open " + path + " for writing");
    }
    void bytes(const void* p, size_t n) {
        os_.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n));
        offset_ += n;
    }
    void u16(uint16_t v) { unsigned char b[2] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>(v >> 8)}; bytes(b, 2); }
    void u32(uint32_t v) {
        unsigned char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
        bytes(b, 4);
    }
    void u64(uint64_t v) {
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
        bytes(b, 8);
    }
    void close() {
        os_.close();
        if (!os_) throw std::runtime_error("write failure on " + path_);
    }

private:
    std::ofstream os_;
    std::string path_;
    size_t offset_ = 0;
};

class ByteReader {
public:
    explicit ByteReader(const std::string& path) : is_(path, std::ios::binary), path_(path) {
        if (!is_) throw std::runtime_error("cannot open " + path);
    }
    void bytes(void* p, size_t n) {
        is_.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n));
        if (!is_)
            throw std::runtime_error("dataset file " + path_ + " truncated at byte offset " +
                                     std::to_string(offset_));
        offset_ += n;
    }
    uint16_t u16() { unsigned char b[2]; bytes(b, 2); return static_cast<uint16_t>(b[0] | (b[1] << 8)); }
    uint32_t u32() {
        unsigned char b[4];
        bytes(b, 4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
        return v;
    }
    uint64_t u64() {
        unsigned char b[8];
        bytes(b, 8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
        return v;
    }
    size_t offset() const { return offset_; }

private:
    std::ifstream is_;
    std::string path_;
    size_t offset_ = 0;
};

} // namespace

void Dataset::save(const std::string& path) const {
    ByteWriter w(path);
    w.bytes(kDataMagic, 4);
    w.u16(1); // version
    w.u16(static_cast<uint16_t>(h));
    w.u16(static_cast<uint16_t>(this->w));
    w.u16(static_cast<uint16_t>(seq_len));
    for (uint32_t v : split_days) w.u32(v);
    w.u32(static_cast<uint32_t>(records.size()));
    std::vector<uint8_t> bits;
    for (const auto& r : records) {
        if (r.h != h || r.w != this->w || r.len != seq_len)
            throw std::invalid_argument("record geometry does not match dataset header");
        w.u64(r.seed);
        w.bytes(&r.episode_flag, 1);
        w.bytes(r.frames.data(), r.frames.size());
        bits.assign((r.mask.size() + 7) / 8, 0);
        for (size_t i = 0; i < r.mask.size(); ++i)
            if (r.mask[i]) bits[i >> 3] |= static_cast<uint8_t>(1u << (i & 7));
        w.bytes(bits.data(), bits.size());
    }
    w.close();
}

Dataset Dataset::load(const std::string& path) {
    ByteReader r(path);
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kDataMagic, 4) != 0)
        throw std::runtime_error("dataset file " + path + " has a bad header at byte offset 0");
    const uint16_t version = r.u16();
    if (version != 1)
        throw std::runtime_error("dataset file " + path + " has unsupported version " +
                                 std::to_string(version));
    Dataset d;
    d.h = r.u16();
    d.w = r.u16();
    d.seq_len = r.u16();
    for (uint32_t& v : d.split_days) v = r.u32();
    const uint32_t count = r.u32();
    const size_t px = static_cast<size_t>(d.h) * d.w * d.seq_len;
    std::vector<uint8_t> bits((px + 7) / 8);
    d.records.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        SequenceSample s;
        s.h = d.h;
        s.w = d.w;
        s.len = d.seq_len;
        s.seed = r.u64();
        r.bytes(&s.episode_flag, 1);
        s.frames.resize(px);
        r.bytes(s.frames.data(), px);
        r.bytes(bits.data(), bits.size());
        s.mask.resize(px);
        for (size_t p = 0; p < px; ++p) s.mask[p] = (bits[p >> 3] >> (p & 7)) & 1u;
        d.records.push_back(std::move(s));
    }
    return d;
}

// --- codecs --------------------------------------------------------------------------

int dbz_to_pixel(double dbz) {
    const double raw = std::floor(255.0 * (dbz + 10.0) / 70.0 + 0.5);
    return static_cast<int>(std::min(255.0, std::max(0.0, raw)));
}

double pixel_to_dbz(int pixel) { return 70.0 * pixel / 255.0 - 10.0; }

double rainrate_to_dbz(double rain_mmh) {
    if (rain_mmh <= 0.0)
        throw std::invalid_argument("rainrate_to_dbz requires a positive rain rate");
    return 10.0 * std::log10(kZrA) + 10.0 * kZrB * std::log10(rain_mmh);
}

double dbz_to_rainrate(double dbz) {
    return std::pow(10.0, (dbz - 10.0 * std::log10(kZrA)) / (10.0 * kZrB));
}

double pixel_to_rainrate(int pixel) { return dbz_to_rainrate(pixel_to_dbz(pixel)); }

int rain_threshold_pixel(double tau_mmh) { return dbz_to_pixel(rainrate_to_dbz(tau_mmh)); }

void clutter_value_filter(SequenceSample& s) {
    for (auto& p : s.frames)
        if (p > 0 && p < 71) p = 0;
}

// --- Mahalanobis outlier model ----------------------------------------------------------

OutlierModel fit_outlier_model(const std::vector<const uint8_t*>& frames, int h, int w,
                               const std::vector<uint8_t>& valid) {
    if (frames.empty()) throw std::invalid_argument("fit_outlier_model needs at least one frame");
    const int64_t px = static_cast<int64_t>(h) * w;
    if (static_cast<int64_t>(valid.size()) != px)
        throw std::invalid_argument("boundary mask size does not match frame geometry");
    std::vector<int64_t> locs;
    for (int64_t p = 0; p < px; ++p)
        if (valid[static_cast<size_t>(p)]) locs.push_back(p);
    const int64_t n = static_cast<int64_t>(locs.size());
    if (n < 2) throw std::invalid_argument("fit_outlier_model needs >= 2 in-boundary locations");

    // occurrence ratios of values 1..255 per location
    Eigen::MatrixXd f(n, 255);
    f.setZero();
    const double inv_t = 1.0 / static_cast<double>(frames.size());
    for (const uint8_t* frame : frames)
        for (int64_t i = 0; i < n; ++i) {
            const uint8_t v = frame[locs[static_cast<size_t>(i)]];
            if (v >= 1) f(i, v - 1) += inv_t;
        }

    Eigen::RowVectorXd mean = f.colwise().mean();
    Eigen::MatrixXd centered = f.rowwise() - mean;
    Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - 1);

    // Moore-Penrose pseudoinverse through the symmetric eigendecomposition
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    const Eigen::VectorXd& ev = es.eigenvalues();
    const double tol = 255.0 * std::numeric_limits<double>::epsilon() *
                       std::max(ev.cwiseAbs().maxCoeff(), 0.0);
    Eigen::VectorXd inv_ev = Eigen::VectorXd::Zero(255);
    for (int i = 0; i < 255; ++i)
        if (ev(i) > tol) inv_ev(i) = 1.0 / ev(i);
    Eigen::MatrixXd pinv =
        es.eigenvectors() * inv_ev.asDiagonal() * es.eigenvectors().transpose();

    OutlierModel m;
    m.h = h;
    m.w = w;
    m.distances.assign(static_cast<size_t>(px), 0.0);
    m.in_boundary.assign(static_cast<size_t>(px), 0);
    m.outlier.assign(static_cast<size_t>(px), 0);
    double dsum = 0.0, dsq = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const Eigen::VectorXd c = centered.row(i).transpose();
        const double d2 = c.dot(pinv * c);
        const double d = std::sqrt(std::max(0.0, d2));
        m.distances[static_cast<size_t>(locs[static_cast<size_t>(i)])] = d;
        m.in_boundary[static_cast<size_t>(locs[static_cast<size_t>(i)])] = 1;
        dsum += d;
        dsq += d * d;
    }
    const double dmean = dsum / static_cast<double>(n);
    const double var = std::max(0.0, (dsq - static_cast<double>(n) * dmean * dmean) /
                                         static_cast<double>(n - 1));
    m.threshold = dmean + 3.0 * std::sqrt(var);
    for (int64_t p = 0; p < px; ++p) {
        if (!m.in_boundary[static_cast<size_t>(p)]) {
            ++m.out_of_boundary;
        } else if (m.distances[static_cast<size_t>(p)] > m.threshold) {
            m.outlier[static_cast<size_t>(p)] = 1;
            ++m.outliers;
        } else {
            ++m.inliers;
        }
    }
    return m;
}

// --- synthetic radar-like streams ----------------------------------------------------

namespace {

struct Blob {
    double y, x, vy, vx, sigma, peak, sigma_rate;
};

} // namespace

std::vector<std::vector<uint8_t>> generate_radar_episode(const RadarStreamConfig& cfg,
                                                         int episode_index,
                                                         std::vector<uint8_t>& mask_out) {
    Rng rng(derive_seed(cfg.seed, static_cast<uint64_t>(episode_index)));
    const double angle = cfg.drift_angle + cfg.drift_angle_per_episode * episode_index;
    const double dvy = cfg.drift_speed * std::sin(angle);
    const double dvx = cfg.drift_speed * std::cos(angle);
    const double gain = 1.0 + cfg.intensity_shift_per_episode * episode_index;

    std::vector<Blob> blobs;
    for (int b = 0; b < cfg.blobs; ++b) {
        Blob bl;
        bl.y = rng.uniform(0.0, cfg.h);
        bl.x = rng.uniform(0.0, cfg.w);
        bl.sigma = rng.uniform(cfg.w / 22.0, cfg.w / 9.0);
        // heavy-tailed peak so high rain-rate levels stay rare
        const double u = rng.uniform();
        bl.peak = 84.0 + (238.0 - 84.0) * std::pow(u, 2.2);
        bl.vy = dvy + rng.uniform(-0.3, 0.3);
        bl.vx = dvx + rng.uniform(-0.3, 0.3);
        bl.sigma_rate = rng.uniform(0.995, 1.006);
        blobs.push_back(bl);
    }

    mask_out.assign(static_cast<size_t>(cfg.h) * cfg.w, 1);
    if (cfg.circular_boundary) {
        const double cy = 0.5 * (cfg.h - 1), cx = 0.5 * (cfg.w - 1);
        const double r = 0.49 * std::min(cfg.h, cfg.w);
        for (int y = 0; y < cfg.h; ++y)
            for (int x = 0; x < cfg.w; ++x)
                if ((y - cy) * (y - cy) + (x - cx) * (x - cx) > r * r)
                    mask_out[static_cast<size_t>(y) * cfg.w + x] = 0;
    }

    std::vector<std::vector<uint8_t>> frames;
    frames.reserve(static_cast<size_t>(cfg.episode_len));
    for (int t = 0; t < cfg.episode_len; ++t) {
        std::vector<uint8_t> frame(static_cast<size_t>(cfg.h) * cfg.w, 0);
        for (int y = 0; y < cfg.h; ++y)
            for (int x = 0; x < cfg.w; ++x) {
                double v = 0.0;
                for (const auto& b : blobs) {
                    // nearest torus image of the blob center
                    double dy = y - b.y;
                    double dx = x - b.x;
                    dy -= cfg.h * std::round(dy / cfg.h);
                    dx -= cfg.w * std::round(dx / cfg.w);
                    const double d2 = dy * dy + dx * dx;
                    const double val = b.peak * std::exp(-d2 / (2.0 * b.sigma * b.sigma));
                    v = std::max(v, val);
                }
                v *= gain;
                const int p = static_cast<int>(std::lround(std::min(255.0, v)));
                frame[static_cast<size_t>(y) * cfg.w + x] = p >= 8 ? static_cast<uint8_t>(p) : 0;
            }
        frames.push_back(std::move(frame));
        for (auto& b : blobs) {
            b.y += b.vy;
            b.x += b.vx;
            if (b.y < 0) b.y += cfg.h;
            if (b.y >= cfg.h) b.y -= cfg.h;
            if (b.x < 0) b.x += cfg.w;
            if (b.x >= cfg.w) b.x -= cfg.w;
            b.sigma *= b.sigma_rate;
        }
    }
    return frames;
}

Dataset make_radar_stream(const RadarStreamConfig& cfg, int j) {
    Dataset d;
    d.h = cfg.h;
    d.w = cfg.w;
    d.seq_len = j;
    std::vector<uint8_t> mask;
    for (int e = 0; e < cfg.episodes; ++e) {
        auto frames = generate_radar_episode(cfg, e, mask);
        const int segments = cfg.episode_len / j;
        for (int s = 0; s < segments; ++s) {
            SequenceSample rec;
            rec.h = cfg.h;
            rec.w = cfg.w;
            rec.len = j;
            rec.seed = derive_seed(cfg.seed, static_cast<uint64_t>(e));
            rec.episode_flag = s == 0 ? 1 : 0;
            rec.frames.reserve(static_cast<size_t>(j) * cfg.h * cfg.w);
            for (int t = 0; t < j; ++t) {
                const auto& f = frames[static_cast<size_t>(s * j + t)];
                rec.frames.insert(rec.frames.end(), f.begin(), f.end());
                rec.mask.insert(rec.mask.end(), mask.begin(), mask.end());
            }
            d.records.push_back(std::move(rec));
        }
    }
    return d;
}

Dataset make_radar_training_set(const RadarStreamConfig& cfg, int j, int k, int windows) {
    const int len = j + k;
    if (cfg.episode_len < len)
        throw std::invalid_argument("episode length is shorter than one training window");
    Dataset d;
    d.h = cfg.h;
    d.w = cfg.w;
    d.seq_len = len;
    Rng rng(derive_seed(cfg.seed, 0xda7a));
    std::vector<std::vector<uint8_t>> frames;
    std::vector<uint8_t> mask;
    int cached_episode = -1;
    for (int i = 0; i < windows; ++i) {
        const int e = static_cast<int>(rng.uniform_index(static_cast<uint64_t>(cfg.episodes)));
        const int start =
            static_cast<int>(rng.uniform_index(static_cast<uint64_t>(cfg.episode_len - len + 1)));
        if (e != cached_episode) {
            frames = generate_radar_episode(cfg, e, mask);
            cached_episode = e;
        }
        SequenceSample rec;
        rec.h = cfg.h;
        rec.w = cfg.w;
        rec.len = len;
        rec.seed = derive_seed(cfg.seed, static_cast<uint64_t>(e));
        rec.episode_flag = 1;
        for (int t = 0; t < len; ++t) {
            const auto& f = frames[static_cast<size_t>(start + t)];
            rec.frames.insert(rec.frames.end(), f.begin(), f.end());
            rec.mask.insert(rec.mask.end(), mask.begin(), mask.end());
        }
        d.records.push_back(std::move(rec));
    }
    return d;
}

Dataset make_mnistpp_stream(const Dataset& mnist, int j) {
    Dataset d;
    d.h = mnist.h;
    d.w = mnist.w;
    d.seq_len = j;
    const int64_t px = static_cast<int64_t>(mnist.h) * mnist.w;
    for (const auto& rec : mnist.records) {
        const int segments = rec.len / j;
        for (int s = 0; s < segments; ++s) {
            SequenceSample seg;
            seg.h = rec.h;
            seg.w = rec.w;
            seg.len = j;
            seg.seed = rec.seed;
            seg.episode_flag = s == 0 ? 1 : 0;
            seg.frames.assign(rec.frames.begin() + static_cast<int64_t>(s) * j * px,
                              rec.frames.begin() + static_cast<int64_t>(s + 1) * j * px);
            seg.mask.assign(rec.mask.begin() + static_cast<int64_t>(s) * j * px,
                            rec.mask.begin() + static_cast<int64_t>(s + 1) * j * px);
            d.records.push_back(std::move(seg));
        }
    }
    return d;
}

} // namespace nwlab
