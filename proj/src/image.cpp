#include "lmdis/image.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace lmdis {

torch::Tensor Image::to_tensor() const {
  auto hwc = torch::from_blob(const_cast<float*>(pixels.data()), {height, width, channels},
                              torch::kFloat32);
  return hwc.permute({2, 0, 1}).clone(torch::MemoryFormat::Contiguous);
}

Image Image::from_tensor(const torch::Tensor& t) {
  auto chw = t.dim() == 4 ? t.squeeze(0) : t;
  if (chw.dim() != 3) throw std::invalid_argument("Image::from_tensor: expected [C,H,W]");
  auto hwc = chw.detach().to(torch::kCPU, torch::kFloat32).permute({1, 2, 0}).contiguous();
  Image img(static_cast<int>(hwc.size(1)), static_cast<int>(hwc.size(0)),
            static_cast<int>(hwc.size(2)));
  std::copy_n(hwc.data_ptr<float>(), img.pixels.size(), img.pixels.begin());
  return img;
}

torch::Tensor stack_images(std::span<const Image> images) {
  std::vector<torch::Tensor> parts;
  parts.reserve(images.size());
  for (const auto& img : images) parts.push_back(img.to_tensor());
  return torch::stack(parts);
}

namespace {

cv::Mat to_mat8(const Image& img) {
  cv::Mat f(img.height, img.width, CV_32FC(img.channels), const_cast<float*>(img.pixels.data()));
  cv::Mat out;
  f.convertTo(out, CV_8U, 255.0);
  if (img.channels == 3) cv::cvtColor(out, out, cv::COLOR_RGB2BGR);
  return out;
}

Image from_mat(const cv::Mat& decoded, int channels) {
  cv::Mat m = decoded;
  const int want = channels > 0 ? channels : (m.channels() == 1 ? 1 : 3);
  if (want == 1 && m.channels() != 1) {
    cv::cvtColor(m, m, m.channels() == 4 ? cv::COLOR_BGRA2GRAY : cv::COLOR_BGR2GRAY);
  } else if (want == 3 && m.channels() == 1) {
    cv::cvtColor(m, m, cv::COLOR_GRAY2RGB);
  } else if (want == 3 && m.channels() == 4) {
    cv::cvtColor(m, m, cv::COLOR_BGRA2RGB);
  } else if (want == 3) {
    cv::cvtColor(m, m, cv::COLOR_BGR2RGB);
  }
  cv::Mat f;
  const double scale = m.depth() == CV_16U ? 1.0 / 65535.0 : 1.0 / 255.0;
  m.convertTo(f, CV_32F, scale);
  Image img(f.cols, f.rows, want);
  for (int y = 0; y < f.rows; ++y) {
    const float* row = f.ptr<float>(y);
    std::copy_n(row, static_cast<size_t>(f.cols) * want,
                img.pixels.begin() + static_cast<std::ptrdiff_t>(y) * f.cols * want);
  }
  return img;
}

}  // namespace

std::vector<uint8_t> encode_png(const Image& img) {
  std::vector<uint8_t> out;
  if (!cv::imencode(".png", to_mat8(img), out)) throw std::runtime_error("PNG encoding failed");
  return out;
}

Image decode_image(std::span<const uint8_t> bytes, int channels) {
  if (bytes.empty()) throw std::runtime_error("empty image payload");
  cv::Mat buf(1, static_cast<int>(bytes.size()), CV_8U, const_cast<uint8_t*>(bytes.data()));
  cv::Mat m = cv::imdecode(buf, cv::IMREAD_UNCHANGED);
  if (m.empty()) throw std::runtime_error("undecodable image payload");
  return from_mat(m, channels);
}

Image read_image(const std::filesystem::path& path, int channels) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw std::runtime_error("cannot decode image " + path.string());
  return from_mat(m, channels);
}

void write_png(const std::filesystem::path& path, const Image& img) {
  const auto bytes = encode_png(img);
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

namespace {

cv::Mat rgb_mat(const Image& img) {
  cv::Mat f(img.height, img.width, CV_32FC(img.channels), const_cast<float*>(img.pixels.data()));
  cv::Mat out;
  if (img.channels == 1) {
    cv::cvtColor(f, out, cv::COLOR_GRAY2RGB);
  } else {
    out = f.clone();
  }
  return out;
}

Image from_rgb_mat(const cv::Mat& m) {
  Image img(m.cols, m.rows, 3);
  cv::Mat dst(m.rows, m.cols, CV_32FC3, img.pixels.data());
  m.copyTo(dst);
  return img;
}

}  // namespace

Image draw_landmarks(const Image& img, const std::vector<std::array<double, 2>>& points, int scale) {
  static const std::array<cv::Scalar, 10> palette{
      cv::Scalar(0.90, 0.10, 0.10), cv::Scalar(0.10, 0.70, 0.10), cv::Scalar(0.10, 0.30, 0.95),
      cv::Scalar(0.95, 0.75, 0.05), cv::Scalar(0.80, 0.10, 0.80), cv::Scalar(0.05, 0.80, 0.80),
      cv::Scalar(1.00, 0.50, 0.00), cv::Scalar(0.50, 0.25, 0.05), cv::Scalar(0.55, 0.55, 0.55),
      cv::Scalar(0.00, 0.00, 0.00)};
  cv::Mat big;
  cv::resize(rgb_mat(img), big, cv::Size(img.width * scale, img.height * scale), 0, 0, cv::INTER_NEAREST);
  for (size_t k = 0; k < points.size(); ++k) {
    const cv::Point center(static_cast<int>(std::lround((points[k][0] - 0.5) * scale)),
                           static_cast<int>(std::lround((points[k][1] - 0.5) * scale)));
    cv::circle(big, center, std::max(2, scale), palette[k % palette.size()], cv::FILLED, cv::LINE_AA);
  }
  return from_rgb_mat(big);
}

Image resize(const Image& img, int width, int height) {
  if (img.width == width && img.height == height) return img;
  cv::Mat src(img.height, img.width, CV_32FC(img.channels), const_cast<float*>(img.pixels.data()));
  cv::Mat dst;
  const bool shrink = width < img.width || height < img.height;
  cv::resize(src, dst, cv::Size(width, height), 0, 0, shrink ? cv::INTER_AREA : cv::INTER_LINEAR);
  Image out(width, height, img.channels);
  std::copy(dst.ptr<float>(), dst.ptr<float>() + out.pixels.size(), out.pixels.begin());
  return out;
}

Image hconcat(const std::vector<Image>& images) {
  std::vector<cv::Mat> mats;
  for (const auto& img : images) mats.push_back(rgb_mat(img));
  cv::Mat out;
  cv::hconcat(mats, out);
  return from_rgb_mat(out);
}

namespace {
constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(std::span<const uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const uint32_t n = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += kAlphabet[(n >> 18) & 63];
    out += kAlphabet[(n >> 12) & 63];
    out += kAlphabet[(n >> 6) & 63];
    out += kAlphabet[n & 63];
  }
  if (i < bytes.size()) {
    uint32_t n = bytes[i] << 16;
    if (i + 1 < bytes.size()) n |= bytes[i + 1] << 8;
    out += kAlphabet[(n >> 18) & 63];
    out += kAlphabet[(n >> 12) & 63];
    out += i + 1 < bytes.size() ? kAlphabet[(n >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

std::vector<uint8_t> base64_decode(const std::string& text) {
  std::array<int, 256> lut{};
  lut.fill(-1);
  for (int i = 0; i < 64; ++i) lut[static_cast<uint8_t>(kAlphabet[i])] = i;
  std::vector<uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  uint32_t acc = 0;
  int bits = 0;
  for (char ch : text) {
    if (ch == '=') break;
    if (ch == '\n' || ch == '\r') continue;
    const int val = lut[static_cast<uint8_t>(ch)];
    if (val < 0) throw std::invalid_argument("malformed base64");
    acc = (acc << 6) | static_cast<uint32_t>(val);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<uint8_t>((acc >> bits) & 0xFF));
    }
  }
  return out;
}

}  // namespace lmdis
