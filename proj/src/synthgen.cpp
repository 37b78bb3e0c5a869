#include "svil/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>

#include "svil/snapshot.hpp"

namespace svil::synth {

namespace {

// Bilinear upsampling of an i.i.d. normal control grid; one field per channel.
std::vector<double> smooth_field(std::size_t channels, std::size_t height, std::size_t width,
                                 CounterRng& rng) {
  const std::size_t gh = height / 4 + 2, gw = width / 4 + 2;
  std::vector<double> out(channels * height * width);
  std::vector<double> grid(gh * gw);
  for (std::size_t c = 0; c < channels; ++c) {
    for (auto& g : grid) g = rng.normal();
    for (std::size_t h = 0; h < height; ++h) {
      const double y = height > 1 ? static_cast<double>(h) * static_cast<double>(gh - 1) / static_cast<double>(height - 1) : 0.0;
      const std::size_t y0 = std::min(static_cast<std::size_t>(y), gh - 2);
      const double fy = y - static_cast<double>(y0);
      for (std::size_t w = 0; w < width; ++w) {
        const double x = width > 1 ? static_cast<double>(w) * static_cast<double>(gw - 1) / static_cast<double>(width - 1) : 0.0;
        const std::size_t x0 = std::min(static_cast<std::size_t>(x), gw - 2);
        const double fx = x - static_cast<double>(x0);
        const double v = (1 - fy) * ((1 - fx) * grid[y0 * gw + x0] + fx * grid[y0 * gw + x0 + 1]) +
                         fy * ((1 - fx) * grid[(y0 + 1) * gw + x0] + fx * grid[(y0 + 1) * gw + x0 + 1]);
        out[(c * height + h) * width + w] = v;
      }
    }
  }
  return out;
}

void standardize_channels(std::span<double> values, std::size_t channels) {
  const std::size_t pix = values.size() / channels;
  for (std::size_t c = 0; c < channels; ++c) {
    auto ch = values.subspan(c * pix, pix);
    double m = 0.0;
    for (double v : ch) m += v;
    m /= static_cast<double>(pix);
    double var = 0.0;
    for (double v : ch) var += (v - m) * (v - m);
    var /= static_cast<double>(pix);
    const double inv = var > 0.0 ? 1.0 / std::sqrt(var) : 0.0;
    for (auto& v : ch) v = (v - m) * inv;
  }
}

DomainStyle random_style(int domain, const DatasetSpec& spec, CounterRng rng) {
  DomainStyle s;
  s.domain_id = domain;
  s.noise = spec.noise;
  const double log_ratio = std::log(spec.sigma_ratio);
  for (std::size_t c = 0; c < spec.channels; ++c) {
    s.mu.push_back(rng.uniform(-spec.mu_range, spec.mu_range));
    s.sigma.push_back(std::exp(rng.uniform(-log_ratio, log_ratio)));
  }
  return s;
}

}  // namespace

void DomainStyle::validate(std::size_t channels) const {
  if (mu.size() != channels || sigma.size() != channels) {
    throw std::invalid_argument("DomainStyle " + std::to_string(domain_id) + ": expected " +
                                std::to_string(channels) + " channels");
  }
  for (double s : sigma) {
    if (!(s > 0.0)) throw std::invalid_argument("DomainStyle " + std::to_string(domain_id) + ": sigma must be > 0");
  }
  if (!(noise >= 0.0)) throw std::invalid_argument("DomainStyle " + std::to_string(domain_id) + ": noise must be >= 0");
}

void DatasetSpec::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw std::invalid_argument(std::string("DatasetSpec.") + name + " must be positive");
  };
  positive(source_domains, "source_domains");
  positive(identities_per_domain, "identities_per_domain");
  positive(images_per_identity, "images_per_identity");
  positive(cameras_per_domain, "cameras_per_domain");
  positive(channels, "channels");
  positive(height, "height");
  positive(width, "width");
  if (!(sigma_ratio >= 1.0)) throw std::invalid_argument("DatasetSpec.sigma_ratio must be >= 1");
  if (!(mu_range >= 0.0) || !(noise >= 0.0) || !(camera_jitter >= 0.0) || !(pose_variation >= 0.0)) {
    throw std::invalid_argument("DatasetSpec: style ranges must be nonnegative");
  }
  if (!styles.empty()) {
    if (styles.size() != num_domains()) {
      throw std::invalid_argument("DatasetSpec.styles: expected " + std::to_string(num_domains()) + " entries");
    }
    for (const auto& s : styles) s.validate(channels);
  }
}

std::optional<int> Dataset::target_domain() const {
  if (!spec.with_target) return std::nullopt;
  return static_cast<int>(spec.source_domains);
}

std::vector<Sample> Dataset::domain_samples(int domain) const {
  std::vector<Sample> out;
  for (const auto& s : samples)
    if (s.domain_id == domain) out.push_back(s);
  return out;
}

std::vector<Sample> Dataset::source_samples() const {
  std::vector<Sample> out;
  for (const auto& s : samples)
    if (s.domain_id < static_cast<int>(spec.source_domains)) out.push_back(s);
  return out;
}

std::vector<Sample> Dataset::target_samples() const {
  const auto t = target_domain();
  if (!t) return {};
  return domain_samples(*t);
}

int Dataset::global_id(int domain, int local) const {
  const int ipd = static_cast<int>(spec.identities_per_domain);
  if (domain < 0 || domain >= static_cast<int>(num_domains()) || local < 0 || local >= ipd) {
    throw std::out_of_range("global_id: (" + std::to_string(domain) + ", " + std::to_string(local) + ")");
  }
  return domain * ipd + local;
}

std::pair<int, int> Dataset::domain_local(int global) const {
  const int ipd = static_cast<int>(spec.identities_per_domain);
  if (global < 0 || global >= ipd * static_cast<int>(num_domains())) {
    throw std::out_of_range("domain_local: " + std::to_string(global));
  }
  return {global / ipd, global % ipd};
}

Dataset generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  Dataset data;
  data.spec = spec;
  const CounterRng root(spec.seed, 0);
  const std::size_t domains = spec.num_domains();
  const std::size_t channels = spec.channels, pix = spec.pixels();

  for (std::size_t d = 0; d < domains; ++d) {
    data.styles.push_back(spec.styles.empty() ? random_style(static_cast<int>(d), spec, root.substream("style", d))
                                              : spec.styles[d]);
    data.styles.back().domain_id = static_cast<int>(d);
  }

  for (std::size_t d = 0; d < domains; ++d) {
    const auto& style = data.styles[d];
    // Camera perturbations are centred so the domain keeps its nominal style.
    auto cam_rng = root.substream("camera", d);
    const std::size_t cams = spec.cameras_per_domain;
    std::vector<double> cam_shift(cams * channels), cam_logscale(cams * channels);
    for (std::size_t i = 0; i < cams * channels; ++i) {
      cam_shift[i] = spec.camera_jitter * cam_rng.normal();
      cam_logscale[i] = spec.camera_jitter * cam_rng.normal();
    }
    for (std::size_t c = 0; c < channels; ++c) {
      double ms = 0.0, ml = 0.0;
      for (std::size_t k = 0; k < cams; ++k) {
        ms += cam_shift[k * channels + c];
        ml += cam_logscale[k * channels + c];
      }
      for (std::size_t k = 0; k < cams; ++k) {
        cam_shift[k * channels + c] -= ms / static_cast<double>(cams);
        cam_logscale[k * channels + c] -= ml / static_cast<double>(cams);
      }
    }

    for (std::size_t local = 0; local < spec.identities_per_domain; ++local) {
      const int global = static_cast<int>(d * spec.identities_per_domain + local);
      auto tpl_rng = root.substream("template", static_cast<std::uint64_t>(global));
      auto base = smooth_field(channels, spec.height, spec.width, tpl_rng);
      // Cross-channel mixing so content lives in colour as well as layout.
      std::vector<double> mix(channels * channels);
      for (auto& m : mix) m = tpl_rng.normal();
      std::vector<double> tpl(channels * pix, 0.0);
      for (std::size_t o = 0; o < channels; ++o)
        for (std::size_t c = 0; c < channels; ++c)
          for (std::size_t p = 0; p < pix; ++p) tpl[o * pix + p] += mix[o * channels + c] * base[c * pix + p];
      standardize_channels(tpl, channels);

      for (std::size_t k = 0; k < spec.images_per_identity; ++k) {
        const std::uint64_t serial = static_cast<std::uint64_t>(global) * spec.images_per_identity + k;
        auto img_rng = root.substream("image", serial);
        auto pose = smooth_field(channels, spec.height, spec.width, img_rng);
        std::vector<double> content(channels * pix);
        for (std::size_t i = 0; i < content.size(); ++i) content[i] = tpl[i] + spec.pose_variation * pose[i];
        standardize_channels(content, channels);

        const std::size_t cam = k % cams;
        Tensor image(Shape{channels, pix});
        for (std::size_t c = 0; c < channels; ++c) {
          const double sigma = style.sigma[c] * std::exp(cam_logscale[cam * channels + c]);
          const double mu = style.mu[c] + cam_shift[cam * channels + c];
          for (std::size_t p = 0; p < pix; ++p) {
            double v = sigma * content[c * pix + p] + mu;
            if (style.noise > 0.0) v += style.noise * img_rng.normal();
            image[c * pix + p] = v;
          }
        }
        data.samples.push_back(Sample{std::move(image), static_cast<int>(local), global, static_cast<int>(d),
                                      static_cast<int>(cam)});
      }
    }
  }
  return data;
}

std::pair<std::vector<double>, std::vector<double>> channel_moments(const Tensor& image) {
  const std::size_t channels = image.dim(0), pix = image.size() / channels;
  std::vector<double> mean(channels), std(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    const auto ch = image.values().subspan(c * pix, pix);
    double m = 0.0;
    for (double v : ch) m += v;
    m /= static_cast<double>(pix);
    double var = 0.0;
    for (double v : ch) var += (v - m) * (v - m);
    mean[c] = m;
    std[c] = std::sqrt(var / static_cast<double>(pix));
  }
  return {mean, std};
}

std::vector<Sample> stylize_images(std::span<const Sample> samples, const DomainStyle& target) {
  std::vector<Sample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    Sample r = s;
    const std::size_t channels = s.image.dim(0), pix = s.image.size() / channels;
    target.validate(channels);
    const auto [mean, stdev] = channel_moments(s.image);
    for (std::size_t c = 0; c < channels; ++c) {
      const double denom = std::sqrt(std::max(stdev[c] * stdev[c], kStdEpsilon));
      for (std::size_t p = 0; p < pix; ++p) {
        auto& v = r.image[c * pix + p];
        v = target.sigma[c] * (v - mean[c]) / denom + target.mu[c];
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<std::vector<Sample>> camera_split(std::span<const Sample> samples, std::size_t n_subsets,
                                              CounterRng rng) {
  if (n_subsets == 0) throw std::invalid_argument("camera_split: n_subsets must be positive");
  std::set<int> camera_set;
  for (const auto& s : samples) camera_set.insert(s.camera_id);
  std::vector<int> cameras(camera_set.begin(), camera_set.end());
  if (cameras.size() < n_subsets) {
    throw std::invalid_argument("camera_split: " + std::to_string(cameras.size()) + " distinct cameras for " +
                                std::to_string(n_subsets) + " subsets");
  }
  for (std::size_t i = cameras.size(); i > 1; --i) std::swap(cameras[i - 1], cameras[rng.below(i)]);
  std::map<int, std::size_t> subset_of;
  for (std::size_t i = 0; i < cameras.size(); ++i) subset_of[cameras[i]] = i % n_subsets;

  std::vector<std::vector<Sample>> out(n_subsets);
  std::vector<std::map<int, int>> local_ids(n_subsets);
  for (const auto& s : samples) {
    const std::size_t k = subset_of.at(s.camera_id);
    auto& ids = local_ids[k];
    auto it = ids.find(s.identity_global);
    if (it == ids.end()) it = ids.emplace(s.identity_global, static_cast<int>(ids.size())).first;
    Sample r = s;
    r.domain_id = static_cast<int>(k);
    r.identity_local = it->second;
    out[k].push_back(std::move(r));
  }
  return out;
}

std::vector<std::size_t> pk_sample_batch(std::span<const int> labels, std::size_t P, std::size_t K,
                                         CounterRng& rng) {
  if (P == 0 || K == 0) throw std::invalid_argument("pk_sample_batch: P and K must be positive");
  std::map<int, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < labels.size(); ++i) by_id[labels[i]].push_back(i);
  if (by_id.size() < P) {
    throw std::invalid_argument("pk_sample_batch: " + std::to_string(by_id.size()) + " identities, need " +
                                std::to_string(P));
  }
  std::vector<int> ids;
  for (const auto& [id, _] : by_id) ids.push_back(id);
  // Partial Fisher-Yates for the first P identities.
  for (std::size_t i = 0; i < P; ++i) std::swap(ids[i], ids[i + rng.below(ids.size() - i)]);
  std::vector<std::size_t> batch;
  batch.reserve(P * K);
  for (std::size_t i = 0; i < P; ++i) {
    auto pool = by_id.at(ids[i]);
    const std::size_t take = std::min(K, pool.size());
    for (std::size_t j = 0; j < take; ++j) std::swap(pool[j], pool[j + rng.below(pool.size() - j)]);
    for (std::size_t j = 0; j < take; ++j) batch.push_back(pool[j]);
    for (std::size_t j = take; j < K; ++j) batch.push_back(pool[rng.below(pool.size())]);
  }
  return batch;
}

namespace {

io::Json spec_to_json(const DatasetSpec& s) {
  io::Json j = {{"source_domains", s.source_domains},
                {"with_target", s.with_target},
                {"identities_per_domain", s.identities_per_domain},
                {"images_per_identity", s.images_per_identity},
                {"cameras_per_domain", s.cameras_per_domain},
                {"channels", s.channels},
                {"height", s.height},
                {"width", s.width},
                {"seed", s.seed},
                {"mu_range", s.mu_range},
                {"sigma_ratio", s.sigma_ratio},
                {"noise", s.noise},
                {"camera_jitter", s.camera_jitter},
                {"pose_variation", s.pose_variation}};
  return j;
}

io::Json style_to_json(const DomainStyle& s) {
  return {{"domain_id", s.domain_id}, {"mu", s.mu}, {"sigma", s.sigma}, {"noise", s.noise}};
}

DomainStyle style_from_json(const io::Json& j) {
  DomainStyle s;
  s.domain_id = j.at("domain_id").get<int>();
  s.mu = j.at("mu").get<std::vector<double>>();
  s.sigma = j.at("sigma").get<std::vector<double>>();
  s.noise = j.at("noise").get<double>();
  return s;
}

}  // namespace

void save_dataset(const Dataset& data, const std::filesystem::path& stem) {
  io::Json manifest;
  manifest["format"] = "svil-dataset/1";
  manifest["spec"] = spec_to_json(data.spec);
  manifest["seed"] = data.spec.seed;
  manifest["explicit_styles"] = !data.spec.styles.empty();
  io::Json styles = io::Json::array();
  for (const auto& s : data.styles) styles.push_back(style_to_json(s));
  manifest["styles"] = styles;
  io::Json samples = io::Json::array();
  std::vector<double> flat;
  for (const auto& s : data.samples) {
    samples.push_back({{"identity_local", s.identity_local},
                       {"identity_global", s.identity_global},
                       {"domain_id", s.domain_id},
                       {"camera_id", s.camera_id},
                       {"shape", s.image.shape()}});
    flat.insert(flat.end(), s.image.values().begin(), s.image.values().end());
  }
  manifest["samples"] = samples;
  manifest["count"] = flat.size();
  io::write_json(io::manifest_path(stem), manifest);
  io::write_blob(io::blob_path(stem), flat);
}

Dataset load_dataset(const std::filesystem::path& stem) {
  const auto manifest = io::read_json(io::manifest_path(stem));
  if (manifest.value("format", "") != "svil-dataset/1") {
    throw std::runtime_error(io::manifest_path(stem).string() + ": not a dataset manifest");
  }
  const auto flat = io::read_blob(io::blob_path(stem));
  if (flat.size() != manifest.at("count").get<std::size_t>()) {
    throw std::runtime_error(io::blob_path(stem).string() + ": value count does not match manifest");
  }
  Dataset data;
  const auto& js = manifest.at("spec");
  auto& s = data.spec;
  s.source_domains = js.at("source_domains");
  s.with_target = js.at("with_target");
  s.identities_per_domain = js.at("identities_per_domain");
  s.images_per_identity = js.at("images_per_identity");
  s.cameras_per_domain = js.at("cameras_per_domain");
  s.channels = js.at("channels");
  s.height = js.at("height");
  s.width = js.at("width");
  s.seed = js.at("seed");
  s.mu_range = js.at("mu_range");
  s.sigma_ratio = js.at("sigma_ratio");
  s.noise = js.at("noise");
  s.camera_jitter = js.at("camera_jitter");
  s.pose_variation = js.at("pose_variation");
  for (const auto& st : manifest.at("styles")) data.styles.push_back(style_from_json(st));
  if (manifest.value("explicit_styles", false)) s.styles = data.styles;
  std::size_t offset = 0;
  for (const auto& e : manifest.at("samples")) {
    Shape shape = e.at("shape").get<Shape>();
    const auto n = shape_volume(shape);
    if (offset + n > flat.size()) throw std::runtime_error("dataset blob too short");
    Sample smp;
    smp.image = Tensor(shape, std::vector<double>(flat.begin() + static_cast<std::ptrdiff_t>(offset),
                                                  flat.begin() + static_cast<std::ptrdiff_t>(offset + n)));
    offset += n;
    smp.identity_local = e.at("identity_local");
    smp.identity_global = e.at("identity_global");
    smp.domain_id = e.at("domain_id");
    smp.camera_id = e.at("camera_id");
    data.samples.push_back(std::move(smp));
  }
  return data;
}

}  // namespace svil::synth
