#include "lmdis/hourglass.hpp"

#include <stdexcept>
#include <string>

#include "lmdis/heatmap.hpp"

namespace lmdis {

void HourglassSpec::validate() const {
  if (channels.empty()) throw std::invalid_argument("HourglassSpec: no levels");
  if (static_cast<int>(skip_convs.size()) != depth()) {
    throw std::invalid_argument("HourglassSpec: need one skip_convs entry per pooling level");
  }
  for (int n : skip_convs) {
    if (n < 1) throw std::invalid_argument("HourglassSpec: every skip link needs at least one conv");
  }
  if (in_channels <= 0 || out_channels <= 0) {
    throw std::invalid_argument("HourglassSpec: channel counts must be positive");
  }
  if (resample < -1 || resample > 1) throw std::invalid_argument("HourglassSpec: resample in {-1,0,1}");
}

void to_json(nlohmann::json& j, const HourglassSpec& s) {
  j = {{"in_channels", s.in_channels}, {"channels", s.channels}, {"skip_convs", s.skip_convs},
       {"out_channels", s.out_channels}, {"resample", s.resample}};
}

void from_json(const nlohmann::json& j, HourglassSpec& s) {
  s.in_channels = j.value("in_channels", s.in_channels);
  s.channels = j.value("channels", s.channels);
  s.skip_convs = j.value("skip_convs", s.skip_convs);
  s.out_channels = j.value("out_channels", s.out_channels);
  s.resample = j.value("resample", s.resample);
}

ConvBlockImpl::ConvBlockImpl(int in, int out) {
  conv_ = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).padding(1)));
  norm_ = register_module("norm", torch::nn::BatchNorm2d(out));
}

torch::Tensor ConvBlockImpl::forward(torch::Tensor x) {
  return torch::leaky_relu(norm_->forward(conv_->forward(x)), kLeakySlope);
}

HourglassImpl::HourglassImpl(HourglassSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  const auto& ch = spec_.channels;
  stem_ = register_module("stem", ConvBlock(spec_.in_channels, ch[0]));
  for (int i = 0; i < spec_.depth(); ++i) {
    torch::nn::Sequential skip;
    for (int c = 0; c < spec_.skip_convs[i]; ++c) skip->push_back(ConvBlock(ch[i], ch[i]));
    skips_->push_back(skip);
    downs_->push_back(ConvBlock(ch[i], ch[i + 1]));
    ups_->push_back(ConvBlock(ch[i + 1], ch[i]));
  }
  register_module("skips", skips_);
  register_module("downs", downs_);
  register_module("ups", ups_);
  bottom_ = register_module("bottom", ConvBlock(ch.back(), ch.back()));
  if (spec_.resample > 0) upscale_ = register_module("upscale", ConvBlock(ch[0], ch[0]));
  head_ = register_module("head", torch::nn::Conv2d(torch::nn::Conv2dOptions(ch[0], spec_.out_channels, 1)));
}

int64_t HourglassImpl::output_size(int64_t input) const {
  if (spec_.resample < 0) return input / 2;
  if (spec_.resample > 0) return input * 2;
  return input;
}

torch::Tensor HourglassImpl::forward(torch::Tensor x) {
  if (x.dim() != 4 || x.size(1) != spec_.in_channels) {
    throw std::invalid_argument("hourglass: expected [B," + std::to_string(spec_.in_channels) +
                                ",H,W] input");
  }
  x = stem_->forward(x);
  if (spec_.resample < 0) x = torch::max_pool2d(x, 2);
  std::vector<torch::Tensor> links;
  links.reserve(spec_.depth());
  for (int i = 0; i < spec_.depth(); ++i) {
    links.push_back(skips_[i]->as<torch::nn::SequentialImpl>()->forward(x));
    if (x.size(2) % 2 != 0 || x.size(3) % 2 != 0) {
      throw std::invalid_argument("hourglass: spatial size not divisible by 2^depth");
    }
    x = downs_[i]->as<ConvBlockImpl>()->forward(torch::max_pool2d(x, 2));
  }
  x = bottom_->forward(x);
  for (int i = spec_.depth() - 1; i >= 0; --i) {
    x = torch::upsample_nearest2d(x, std::vector<int64_t>{x.size(2) * 2, x.size(3) * 2});
    x = ups_[i]->as<ConvBlockImpl>()->forward(x) + links[i];
  }
  if (spec_.resample > 0) {
    x = torch::upsample_nearest2d(x, std::vector<int64_t>{x.size(2) * 2, x.size(3) * 2});
    x = upscale_->forward(x);
  }
  return head_->forward(x);
}

}  // namespace lmdis
