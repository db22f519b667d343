#include "wsed/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace wsed {

namespace {

constexpr double kPi = 3.14159265358979323846;

void require(bool cond, const std::string& msg) {
    if (!cond) {
        throw std::invalid_argument(msg);
    }
}

bool is_power_of_two(std::size_t n) {
    return n != 0 && (n & (n - 1)) == 0;
}

// In-place iterative radix-2 FFT.
void fft(std::vector<std::complex<double>>& a) {
    const std::size_t n = a.size();
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) {
            j ^= bit;
        }
        j ^= bit;
        if (i < j) {
            std::swap(a[i], a[j]);
        }
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * kPi / static_cast<double>(len);
        const std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (std::size_t j = 0; j < len / 2; ++j) {
                const std::complex<double> u = a[i + j];
                const std::complex<double> v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wl;
            }
        }
    }
}

}  // namespace

const char* to_string(FeatureKind kind) {
    switch (kind) {
        case FeatureKind::spectrogram:
            return "spectrogram";
        case FeatureKind::logmel:
            return "logmel";
        case FeatureKind::mfcc:
            return "mfcc";
    }
    return "?";
}

FeatureKind feature_kind_from_string(const std::string& name) {
    if (name == "spectrogram") {
        return FeatureKind::spectrogram;
    }
    if (name == "logmel") {
        return FeatureKind::logmel;
    }
    if (name == "mfcc") {
        return FeatureKind::mfcc;
    }
    throw std::invalid_argument("unknown feature kind '" + name + "'");
}

Stft stft(const AudioClip& clip, std::size_t win_length, std::size_t hop, std::size_t n_fft,
          Window window) {
    require(clip.sample_rate > 0.0, "stft: sample rate must be positive");
    require(!clip.samples.empty(), "stft: empty clip");
    require(hop > 0, "stft: hop must be positive");
    require(win_length <= n_fft, "stft: win_length must not exceed n_fft");
    require(is_power_of_two(n_fft), "stft: n_fft must be a power of two");
    const std::size_t n = clip.samples.size();
    require(n >= win_length, "stft: clip of " + std::to_string(n) +
                                 " samples is shorter than one window (" +
                                 std::to_string(win_length) + ")");

    std::vector<double> win(win_length, 1.0);
    if (window == Window::hann) {
        for (std::size_t i = 0; i < win_length; ++i) {
            win[i] = 0.5 - 0.5 * std::cos(2.0 * kPi * static_cast<double>(i) /
                                          static_cast<double>(win_length));
        }
    }

    const std::size_t n_frames = (n - 1) / hop + 1;
    Stft out;
    out.rows = n_frames;
    out.cols = n_fft / 2 + 1;
    out.values.assign(out.rows * out.cols, {0.0, 0.0});

    std::vector<std::complex<double>> buf(n_fft);
    for (std::size_t t = 0; t < n_frames; ++t) {
        const std::size_t start = t * hop;
        std::fill(buf.begin(), buf.end(), std::complex<double>(0.0, 0.0));
        const std::size_t count = std::min(win_length, n - start);
        for (std::size_t i = 0; i < count; ++i) {
            buf[i] = clip.samples[start + i] * win[i];
        }
        fft(buf);
        for (std::size_t k = 0; k < out.cols; ++k) {
            out.at(t, k) = buf[k];
        }
    }
    return out;
}

FeatureMatrix power_spectrogram(const Stft& spectra) {
    FeatureMatrix out(FeatureKind::spectrogram, spectra.rows, spectra.cols);
    for (std::size_t i = 0; i < spectra.values.size(); ++i) {
        out.values[i] = std::norm(spectra.values[i]);
    }
    return out;
}

double mel_of_hz(double hz) {
    return 2595.0 * std::log10(1.0 + hz / 700.0);
}

double hz_of_mel(double mel) {
    return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
}

Tensor mel_matrix(std::size_t n_mels, double sample_rate, std::size_t n_fft, double fmin,
                  double fmax) {
    require(n_mels >= 1, "mel_matrix: n_mels must be positive");
    require(fmin >= 0.0 && fmin < fmax, "mel_matrix: need 0 <= fmin < fmax");
    require(fmax <= sample_rate / 2.0, "mel_matrix: fmax above Nyquist");

    const std::size_t bins = n_fft / 2 + 1;
    const double mel_lo = mel_of_hz(fmin);
    const double mel_hi = mel_of_hz(fmax);
    // n_mels + 2 edge points; filter i peaks at point i+1
    std::vector<double> edges(n_mels + 2);
    for (std::size_t i = 0; i < edges.size(); ++i) {
        edges[i] = hz_of_mel(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) /
                                          static_cast<double>(n_mels + 1));
    }

    Tensor out({n_mels, bins});
    for (std::size_t m = 0; m < n_mels; ++m) {
        const double lo = edges[m], center = edges[m + 1], hi = edges[m + 2];
        double row_sum = 0.0;
        for (std::size_t k = 0; k < bins; ++k) {
            const double f = static_cast<double>(k) * sample_rate / static_cast<double>(n_fft);
            double w = 0.0;
            if (f > lo && f < hi) {
                w = (f <= center) ? (f - lo) / (center - lo) : (hi - f) / (hi - center);
            }
            out(m, k) = w;
            row_sum += w;
        }
        if (row_sum <= 0.0) {
            throw std::invalid_argument(
                "mel_matrix: filter " + std::to_string(m) +
                " is empty; n_mels too large for the FFT resolution");
        }
    }
    return out;
}

FeatureMatrix log_mel(const FeatureMatrix& spec_power, const Tensor& mel, double floor) {
    require(mel.ndim() == 2, "log_mel: mel matrix must be 2-d");
    require(mel.shape[1] == spec_power.cols,
            "log_mel: mel matrix has " + std::to_string(mel.shape[1]) +
                " bins but spectrogram has " + std::to_string(spec_power.cols));
    require(floor > 0.0, "log_mel: floor must be positive");

    const std::size_t n_mels = mel.shape[0];
    FeatureMatrix out(FeatureKind::logmel, spec_power.rows, n_mels);
    for (std::size_t t = 0; t < spec_power.rows; ++t) {
        const double* frame = spec_power.values.data() + t * spec_power.cols;
        for (std::size_t m = 0; m < n_mels; ++m) {
            const double* filt = mel.data.data() + m * mel.shape[1];
            double acc = 0.0;
            for (std::size_t k = 0; k < spec_power.cols; ++k) {
                acc += filt[k] * frame[k];
            }
            out.at(t, m) = std::log(std::max(acc, floor));
        }
    }
    return out;
}

FeatureMatrix mfcc(const FeatureMatrix& logmel, std::size_t n_coeffs) {
    require(n_coeffs >= 1, "mfcc: n_coeffs must be positive");
    require(n_coeffs <= logmel.cols, "mfcc: n_coeffs (" + std::to_string(n_coeffs) +
                                         ") exceeds mel bin count (" + std::to_string(logmel.cols) +
                                         ")");
    const std::size_t n = logmel.cols;
    FeatureMatrix out(FeatureKind::mfcc, logmel.rows, n_coeffs);
    const double s0 = std::sqrt(1.0 / static_cast<double>(n));
    const double sk = std::sqrt(2.0 / static_cast<double>(n));
    for (std::size_t t = 0; t < logmel.rows; ++t) {
        const double* row = logmel.values.data() + t * n;
        for (std::size_t k = 0; k < n_coeffs; ++k) {
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                acc += row[i] * std::cos(kPi * (static_cast<double>(i) + 0.5) *
                                         static_cast<double>(k) / static_cast<double>(n));
            }
            out.at(t, k) = acc * (k == 0 ? s0 : sk);
        }
    }
    return out;
}

FeatureMatrix fit_frames(const FeatureMatrix& m, std::size_t target) {
    require(m.rows > 0 && m.cols > 0, "fit_frames: empty matrix");
    require(target > 0, "fit_frames: target must be positive");
    if (m.rows == target) {
        return m;
    }
    FeatureMatrix out(m.kind, target, m.cols);
    if (m.rows > target) {
        const std::size_t start = (m.rows - target) / 2;
        std::copy_n(m.values.data() + start * m.cols, target * m.cols, out.values.data());
    } else {
        std::copy_n(m.values.data(), m.rows * m.cols, out.values.data());
    }
    return out;
}

FeatureMatrix extract_features(const AudioClip& clip, FeatureKind kind, const FeatureConfig& cfg) {
    const Stft spectra = stft(clip, cfg.win_length, cfg.hop_length, cfg.n_fft, Window::hann);
    FeatureMatrix power = power_spectrogram(spectra);
    if (kind == FeatureKind::spectrogram) {
        for (double& v : power.values) {
            v = std::log(std::max(v, 1e-10));
        }
        return fit_frames(power, cfg.frames);
    }
    const Tensor mel = mel_matrix(cfg.n_mels, cfg.sample_rate, cfg.n_fft, cfg.fmin, cfg.fmax);
    FeatureMatrix lm = log_mel(power, mel);
    if (kind == FeatureKind::logmel) {
        return fit_frames(lm, cfg.frames);
    }
    return fit_frames(mfcc(lm, cfg.n_mfcc), cfg.frames);
}

Standardizer Standardizer::fit(const std::vector<FeatureMatrix>& features) {
    require(!features.empty(), "Standardizer::fit: no features");
    const std::size_t bins = features.front().cols;
    for (const FeatureMatrix& f : features) {
        require(f.cols == bins, "Standardizer::fit: inconsistent bin counts");
    }
    Standardizer s;
    s.mean.assign(bins, 0.0);
    s.stddev.assign(bins, 0.0);
    std::size_t count = 0;
    for (const FeatureMatrix& f : features) {
        for (std::size_t t = 0; t < f.rows; ++t) {
            for (std::size_t c = 0; c < bins; ++c) {
                s.mean[c] += f.at(t, c);
            }
        }
        count += f.rows;
    }
    for (double& v : s.mean) {
        v /= static_cast<double>(count);
    }
    for (const FeatureMatrix& f : features) {
        for (std::size_t t = 0; t < f.rows; ++t) {
            for (std::size_t c = 0; c < bins; ++c) {
                const double d = f.at(t, c) - s.mean[c];
                s.stddev[c] += d * d;
            }
        }
    }
    for (double& v : s.stddev) {
        v = std::max(std::sqrt(v / static_cast<double>(count)), 1e-8);
    }
    return s;
}

Standardizer Standardizer::identity(std::size_t bins) {
    Standardizer s;
    s.mean.assign(bins, 0.0);
    s.stddev.assign(bins, 1.0);
    return s;
}

void Standardizer::apply(FeatureMatrix& m) const {
    require(m.cols == mean.size(), "Standardizer::apply: bin count mismatch");
    for (std::size_t t = 0; t < m.rows; ++t) {
        for (std::size_t c = 0; c < m.cols; ++c) {
            m.at(t, c) = (m.at(t, c) - mean[c]) / stddev[c];
        }
    }
}

namespace {

std::uint32_t read_u32le(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t read_u16le(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

void put_u32le(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back(static_cast<unsigned char>(v & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
}

void put_u16le(std::vector<unsigned char>& out, std::uint16_t v) {
    out.push_back(static_cast<unsigned char>(v & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
}

}  // namespace

AudioClip read_wav(const std::string& path, const std::string& clip_id) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("read_wav: cannot open " + path);
    }
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    if (bytes.size() < 44 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
        std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
        throw std::runtime_error("read_wav: " + path + " is not a RIFF/WAVE file");
    }

    std::uint16_t format = 0, channels = 0, bits = 0;
    std::uint32_t sample_rate = 0;
    std::size_t data_off = 0, data_len = 0;
    std::size_t pos = 12;
    while (pos + 8 <= bytes.size()) {
        const char* tag = reinterpret_cast<const char*>(bytes.data() + pos);
        const std::uint32_t len = read_u32le(bytes.data() + pos + 4);
        const std::size_t body = pos + 8;
        if (body + len > bytes.size()) {
            throw std::runtime_error("read_wav: truncated chunk in " + path);
        }
        if (std::memcmp(tag, "fmt ", 4) == 0) {
            if (len < 16) {
                throw std::runtime_error("read_wav: malformed fmt chunk in " + path);
            }
            format = read_u16le(bytes.data() + body);
            channels = read_u16le(bytes.data() + body + 2);
            sample_rate = read_u32le(bytes.data() + body + 4);
            bits = read_u16le(bytes.data() + body + 14);
        } else if (std::memcmp(tag, "data", 4) == 0) {
            data_off = body;
            data_len = len;
        }
        pos = body + len + (len & 1);  // chunks are word-aligned
    }

    if (data_off == 0 || channels == 0 || sample_rate == 0) {
        throw std::runtime_error("read_wav: missing fmt or data chunk in " + path);
    }
    const bool pcm16 = format == 1 && bits == 16;
    const bool float32 = format == 3 && bits == 32;
    if (!pcm16 && !float32) {
        throw std::runtime_error("read_wav: unsupported format in " + path +
                                 " (want PCM16 or float32)");
    }

    const std::size_t bytes_per_sample = bits / 8;
    const std::size_t frame_bytes = bytes_per_sample * channels;
    const std::size_t n_frames = data_len / frame_bytes;
    if (n_frames == 0) {
        throw std::runtime_error("read_wav: no audio frames in " + path);
    }

    AudioClip clip;
    clip.clip_id = clip_id.empty() ? path : clip_id;
    clip.sample_rate = static_cast<double>(sample_rate);
    clip.samples.resize(n_frames);
    const unsigned char* d = bytes.data() + data_off;
    for (std::size_t i = 0; i < n_frames; ++i) {
        double acc = 0.0;
        for (std::size_t ch = 0; ch < channels; ++ch) {
            const unsigned char* s = d + i * frame_bytes + ch * bytes_per_sample;
            if (pcm16) {
                const std::int16_t v = static_cast<std::int16_t>(read_u16le(s));
                acc += static_cast<double>(v) / 32768.0;
            } else {
                float f;
                std::memcpy(&f, s, 4);
                acc += static_cast<double>(f);
            }
        }
        clip.samples[i] = acc / static_cast<double>(channels);
    }
    return clip;
}

void write_wav_pcm16(const std::string& path, const std::vector<double>& samples,
                     std::uint32_t sample_rate) {
    std::vector<unsigned char> out;
    out.reserve(44 + samples.size() * 2);
    const std::uint32_t data_len = static_cast<std::uint32_t>(samples.size() * 2);
    const char* riff = "RIFF";
    out.insert(out.end(), riff, riff + 4);
    put_u32le(out, 36 + data_len);
    const char* wavefmt = "WAVEfmt ";
    out.insert(out.end(), wavefmt, wavefmt + 8);
    put_u32le(out, 16);
    put_u16le(out, 1);   // PCM
    put_u16le(out, 1);   // mono
    put_u32le(out, sample_rate);
    put_u32le(out, sample_rate * 2);
    put_u16le(out, 2);
    put_u16le(out, 16);
    const char* data = "data";
    out.insert(out.end(), data, data + 4);
    put_u32le(out, data_len);
    for (double v : samples) {
        const double clipped = std::min(1.0, std::max(-1.0, v));
        const std::int16_t q = static_cast<std::int16_t>(std::lrint(clipped * 32767.0));
        put_u16le(out, static_cast<std::uint16_t>(q));
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) {
        throw std::runtime_error("write_wav_pcm16: cannot open " + path);
    }
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (!f) {
        throw std::runtime_error("write_wav_pcm16: write failed for " + path);
    }
}

}  // namespace wsed
