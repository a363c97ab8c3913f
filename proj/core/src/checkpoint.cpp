#include "mmfa/checkpoint.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "mmfa/error.hpp"

namespace mmfa::checkpoint {

namespace {

class Writer {
 public:
  template <typename T>
  void pod(T value) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void raw(const void* data, size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  void str(const std::string& s) {
    pod<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }

  Bytes bytes;
};

class Reader {
 public:
  explicit Reader(const Bytes& data) : data_(data) {}

  template <typename T>
  T pod() {
    T value;
    std::memcpy(&value, take(sizeof(T)), sizeof(T));
    return value;
  }
  const std::uint8_t* take(size_t n) {
    if (n > data_.size() - offset_) throw CheckpointError("checkpoint is truncated or corrupt");
    const auto* p = data_.data() + offset_;
    offset_ += n;
    return p;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    const auto* p = take(n);
    return {reinterpret_cast<const char*>(p), n};
  }
  bool done() const { return offset_ == data_.size(); }

 private:
  const Bytes& data_;
  size_t offset_ = 0;
};

std::uint32_t crc(const Bytes& b) {
  return static_cast<std::uint32_t>(::crc32(0L, b.data(), static_cast<uInt>(b.size())));
}

Bytes to_bytes(const std::string& s) { return {s.begin(), s.end()}; }
std::string to_string(const Bytes& b) { return {b.begin(), b.end()}; }

}  // namespace

void Container::set(const std::string& name, Bytes payload) {
  if (!sections_.count(name)) order_.push_back(name);
  sections_[name] = std::move(payload);
}

bool Container::has(const std::string& name) const { return sections_.count(name) > 0; }

const Bytes& Container::get(const std::string& name) const {
  auto it = sections_.find(name);
  if (it == sections_.end()) throw CheckpointError("checkpoint has no '" + name + "' section");
  return it->second;
}

Bytes Container::serialize() const {
  Writer w;
  w.raw(kMagic, sizeof(kMagic));
  w.pod<std::uint32_t>(kVersion);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(order_.size()));
  for (const auto& name : order_) {
    const auto& payload = sections_.at(name);
    w.str(name);
    w.pod<std::uint64_t>(payload.size());
    w.raw(payload.data(), payload.size());
    w.pod<std::uint32_t>(crc(payload));
  }
  return std::move(w.bytes);
}

Container Container::parse(const Bytes& data) {
  Reader r(data);
  if (data.size() < sizeof(kMagic) || std::memcmp(r.take(sizeof(kMagic)), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("not a checkpoint file (bad magic)");
  }
  const auto version = r.pod<std::uint32_t>();
  if (version != kVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version) + " (this build reads version " +
                          std::to_string(kVersion) + ")");
  }
  const auto count = r.pod<std::uint32_t>();
  Container c;
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = r.str();
    const auto n = r.pod<std::uint64_t>();
    const auto* p = r.take(static_cast<size_t>(n));
    Bytes payload(p, p + n);
    if (r.pod<std::uint32_t>() != crc(payload)) {
      throw CheckpointError("checksum mismatch in checkpoint section '" + name + "'");
    }
    c.set(name, std::move(payload));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after the last checkpoint section");
  return c;
}

void Container::write(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint '" + path.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("short write to checkpoint '" + path.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

Container Container::read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse(data);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

Bytes encode_tensors(const std::vector<std::pair<std::string, torch::Tensor>>& tensors) {
  Writer w;
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    auto t = tensor.detach().cpu().contiguous();
    w.str(name);
    w.pod<std::int32_t>(static_cast<std::int32_t>(t.scalar_type()));
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(t.dim()));
    for (auto s : t.sizes()) w.pod<std::int64_t>(s);
    const auto nbytes = static_cast<std::uint64_t>(t.numel()) * t.element_size();
    w.pod<std::uint64_t>(nbytes);
    w.raw(t.data_ptr(), nbytes);
  }
  return std::move(w.bytes);
}

std::vector<std::pair<std::string, torch::Tensor>> decode_tensors(const Bytes& payload) {
  Reader r(payload);
  std::vector<std::pair<std::string, torch::Tensor>> out;
  const auto count = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = r.str();
    const auto type = static_cast<c10::ScalarType>(r.pod<std::int32_t>());
    const auto dim = r.pod<std::uint32_t>();
    if (dim > 16) throw CheckpointError("tensor '" + name + "' has an implausible rank");
    std::vector<int64_t> sizes(dim);
    for (auto& s : sizes) s = r.pod<std::int64_t>();
    const auto nbytes = r.pod<std::uint64_t>();
    torch::Tensor t;
    try {
      t = torch::empty(sizes, torch::TensorOptions().dtype(type));
    } catch (const c10::Error&) {
      throw CheckpointError("tensor '" + name + "' has an invalid dtype or shape");
    }
    if (nbytes != static_cast<std::uint64_t>(t.numel()) * t.element_size()) {
      throw CheckpointError("tensor '" + name + "' has a size mismatch");
    }
    std::memcpy(t.data_ptr(), r.take(nbytes), nbytes);
    out.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) throw CheckpointError("trailing bytes in tensor section");
  return out;
}

Bytes encode_module(const torch::nn::Module& module) {
  std::vector<std::pair<std::string, torch::Tensor>> tensors;
  for (const auto& item : module.named_parameters()) tensors.emplace_back("p:" + item.key(), item.value());
  for (const auto& item : module.named_buffers()) tensors.emplace_back("b:" + item.key(), item.value());
  return encode_tensors(tensors);
}

void decode_module(const Bytes& payload, torch::nn::Module& module) {
  std::map<std::string, torch::Tensor> stored;
  for (auto& [name, t] : decode_tensors(payload)) stored.emplace(name, t);
  torch::NoGradGuard no_grad;
  size_t used = 0;
  auto assign = [&](const std::string& key, torch::Tensor& target) {
    auto it = stored.find(key);
    if (it == stored.end()) throw CheckpointError("checkpoint is missing '" + key.substr(2) + "'");
    if (it->second.sizes() != target.sizes() || it->second.scalar_type() != target.scalar_type()) {
      throw CheckpointError("checkpoint entry '" + key.substr(2) + "' does not match the model (shape or dtype)");
    }
    target.copy_(it->second);
    ++used;
  };
  for (auto& item : module.named_parameters()) assign("p:" + item.key(), item.value());
  for (auto& item : module.named_buffers()) assign("b:" + item.key(), item.value());
  if (used != stored.size()) throw CheckpointError("checkpoint holds entries the model does not have");
}

Bytes encode_adam(torch::optim::Adam& optimizer) {
  Writer w;
  auto& state = optimizer.state();
  std::uint32_t index = 0;
  std::vector<std::pair<std::string, torch::Tensor>> tensors;
  for (auto& group : optimizer.param_groups()) {
    for (auto& p : group.params()) {
      auto it = state.find(p.unsafeGetTensorImpl());
      if (it != state.end()) {
        auto& s = static_cast<torch::optim::AdamParamState&>(*it->second);
        const auto tag = std::to_string(index);
        tensors.emplace_back("step:" + tag, torch::tensor({s.step()}, torch::kInt64));
        tensors.emplace_back("exp_avg:" + tag, s.exp_avg());
        tensors.emplace_back("exp_avg_sq:" + tag, s.exp_avg_sq());
      }
      ++index;
    }
  }
  w.pod<std::uint32_t>(index);
  auto body = encode_tensors(tensors);
  w.raw(body.data(), body.size());
  return std::move(w.bytes);
}

void decode_adam(const Bytes& payload, torch::optim::Adam& optimizer) {
  Reader r(payload);
  const auto expected = r.pod<std::uint32_t>();
  Bytes body(payload.begin() + sizeof(std::uint32_t), payload.end());
  std::map<std::string, torch::Tensor> stored;
  for (auto& [name, t] : decode_tensors(body)) stored.emplace(name, t);
  std::vector<torch::Tensor> params;
  for (auto& group : optimizer.param_groups()) {
    for (auto& p : group.params()) params.push_back(p);
  }
  if (params.size() != expected) throw CheckpointError("optimizer state does not match the parameter count");
  auto& state = optimizer.state();
  state.clear();
  for (size_t i = 0; i < params.size(); ++i) {
    const auto tag = std::to_string(i);
    auto step = stored.find("step:" + tag);
    if (step == stored.end()) continue;
    auto avg = stored.at("exp_avg:" + tag);
    auto avg_sq = stored.at("exp_avg_sq:" + tag);
    if (avg.sizes() != params[i].sizes()) throw CheckpointError("optimizer moment shape mismatch");
    auto s = std::make_unique<torch::optim::AdamParamState>();
    s->step(step->second.item<int64_t>());
    s->exp_avg(avg.clone());
    s->exp_avg_sq(avg_sq.clone());
    state[params[i].unsafeGetTensorImpl()] = std::move(s);
  }
}

void save_checkpoint(const pipeline::TrainingState& st, const std::filesystem::path& path) {
  Container c;
  c.set("config", to_bytes(st.config.to_json()));
  {
    Writer w;
    w.pod<std::int64_t>(st.step);
    w.pod<std::int64_t>(st.vae_step);
    w.pod<std::uint8_t>(st.vae_trained ? 1 : 0);
    c.set("counters", std::move(w.bytes));
  }
  {
    std::ostringstream os;
    os << st.rng;
    c.set("rng", to_bytes(os.str()));
  }
  c.set("model", encode_module(*st.model));
  c.set("optim.generator", encode_adam(*st.generator_optimizer));
  c.set("optim.discriminator", encode_adam(*st.discriminator_optimizer));
  if (st.vae_trained) {
    c.set("vae", encode_module(*st.vae));
    c.set("optim.vae", encode_adam(*st.vae_optimizer));
    c.set("optim.vae_discriminator", encode_adam(*st.vae_discriminator_optimizer));
  }
  c.write(path);
}

std::unique_ptr<pipeline::TrainingState> load_checkpoint(const std::filesystem::path& path) {
  auto c = Container::read(path);
  pipeline::RunConfig config;
  try {
    config = pipeline::RunConfig::from_json(to_string(c.get("config")));
  } catch (const InvalidArgument& e) {
    throw CheckpointError(std::string("checkpoint config is invalid: ") + e.what());
  }
  auto st = std::make_unique<pipeline::TrainingState>(config);
  {
    const auto& counters = c.get("counters");
    Reader r(counters);
    st->step = r.pod<std::int64_t>();
    st->vae_step = r.pod<std::int64_t>();
    st->vae_trained = r.pod<std::uint8_t>() != 0;
  }
  {
    std::istringstream is(to_string(c.get("rng")));
    is >> st->rng;
    if (!is) throw CheckpointError("checkpoint RNG state is unreadable");
  }
  decode_module(c.get("model"), *st->model);
  decode_adam(c.get("optim.generator"), *st->generator_optimizer);
  decode_adam(c.get("optim.discriminator"), *st->discriminator_optimizer);
  if (st->vae_trained) {
    decode_module(c.get("vae"), *st->vae);
    decode_adam(c.get("optim.vae"), *st->vae_optimizer);
    decode_adam(c.get("optim.vae_discriminator"), *st->vae_discriminator_optimizer);
  }
  return st;
}

pipeline::RunConfig read_config(const std::filesystem::path& path) {
  auto c = Container::read(path);
  return pipeline::RunConfig::from_json(to_string(c.get("config")));
}

bool has_vae(const std::filesystem::path& path) { return Container::read(path).has("vae"); }

void load_vae(const std::filesystem::path& path, vae::ExpressionVae& vae) {
  auto c = Container::read(path);
  decode_module(c.get("vae"), *vae);
}

}  // namespace mmfa::checkpoint
