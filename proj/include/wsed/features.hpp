#pragma once

#include "wsed/tensor.hpp"

#include <complex>
#include <cstdint>
#include <string>
#include <vector>

namespace wsed {

// Mono audio in [-1, 1].
struct AudioClip {
    std::string clip_id;
    std::vector<double> samples;
    double sample_rate = 0.0;
};

enum class FeatureKind { spectrogram, logmel, mfcc };

const char* to_string(FeatureKind kind);
FeatureKind feature_kind_from_string(const std::string& name);

// Row-major frames x bins matrix. After fit_frames the row count is the
// configured clip length (240 by default).
struct FeatureMatrix {
    FeatureKind kind = FeatureKind::logmel;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;

    FeatureMatrix() = default;
    FeatureMatrix(FeatureKind k, std::size_t r, std::size_t c)
        : kind(k), rows(r), cols(c), values(r * c, 0.0) {}

    double& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

enum class Window { hann, rectangular };

// Complex short-time spectra, frames x (n_fft/2 + 1).
struct Stft {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::complex<double>> values;

    std::complex<double>& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
    const std::complex<double>& at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

// Frame t covers samples [t*hop, t*hop + win_length); the final partial frame
// is zero-padded. Frames exist for every start index below the sample count,
// so the frame count is floor((n_samples - 1) / hop) + 1. Requires
// win_length <= n_fft (n_fft a power of two) and a clip at least one window
// long.
Stft stft(const AudioClip& clip, std::size_t win_length, std::size_t hop, std::size_t n_fft,
          Window window = Window::hann);

// |X|^2 per bin; kind tag is `spectrogram`.
FeatureMatrix power_spectrogram(const Stft& spectra);

double mel_of_hz(double hz);  // 2595 * log10(1 + hz/700)
double hz_of_mel(double mel);

// Triangular filters with unit peak on the mel scale: rows [n_mels, n_fft/2+1].
// Throws when the FFT resolution cannot separate the requested filters (an
// all-zero filter row).
Tensor mel_matrix(std::size_t n_mels, double sample_rate, std::size_t n_fft, double fmin,
                  double fmax);

// log(max(mel * power, floor)) per frame.
FeatureMatrix log_mel(const FeatureMatrix& spec_power, const Tensor& mel, double floor = 1e-10);

// Orthonormal DCT-II along the bin axis, first n_coeffs kept.
FeatureMatrix mfcc(const FeatureMatrix& logmel, std::size_t n_coeffs);

// Longer inputs are center-truncated (start row = (rows - target) / 2),
// shorter inputs zero-padded at the end.
FeatureMatrix fit_frames(const FeatureMatrix& m, std::size_t target = 240);

struct FeatureConfig {
    double sample_rate = 16000.0;
    std::size_t n_fft = 1024;
    std::size_t win_length = 1024;
    std::size_t hop_length = 664;
    std::size_t n_mels = 64;
    std::size_t n_mfcc = 24;
    double fmin = 50.0;
    double fmax = 8000.0;
    std::size_t frames = 240;

    double frame_hop_seconds() const { return static_cast<double>(hop_length) / sample_rate; }
};

// Full front end: stft -> power -> (log-mel -> mfcc) -> fit_frames. The
// `spectrogram` kind is stored as log power with the same 1e-10 floor as the
// mel path.
FeatureMatrix extract_features(const AudioClip& clip, FeatureKind kind, const FeatureConfig& cfg);

// Per-bin global standardization fitted on the training set and stored in
// checkpoints.
struct Standardizer {
    std::vector<double> mean;
    std::vector<double> stddev;  // floored at 1e-8

    static Standardizer fit(const std::vector<FeatureMatrix>& features);
    static Standardizer identity(std::size_t bins);
    void apply(FeatureMatrix& m) const;
};

// RIFF/WAVE reader: PCM 16-bit and IEEE float 32-bit, little-endian; multi-
// channel input is downmixed to mono by averaging.
AudioClip read_wav(const std::string& path, const std::string& clip_id = "");
void write_wav_pcm16(const std::string& path, const std::vector<double>& samples,
                     std::uint32_t sample_rate);

}  // namespace wsed
