#include "icam/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "icam/util.hpp"

namespace icam {
namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xffu), static_cast<char>((v >> 8) & 0xffu),
                     static_cast<char>((v >> 16) & 0xffu), static_cast<char>((v >> 24) & 0xffu)};
  out.write(b, 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw IoError("checkpoint truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::string get_bytes(std::istream& in, std::uint32_t n) {
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw IoError("checkpoint truncated");
  return s;
}

}  // namespace

const torch::Tensor& CheckpointData::tensor(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.value;
  }
  throw IoError("checkpoint has no tensor named " + name);
}

bool CheckpointData::has(const std::string& name) const {
  return std::any_of(tensors.begin(), tensors.end(), [&](const auto& t) { return t.name == name; });
}

TensorRecord tensor_to_record(const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat32).contiguous();
  TensorRecord r;
  for (auto d : c.sizes()) r.dims.push_back(static_cast<std::uint32_t>(d));
  r.values.assign(c.data_ptr<float>(), c.data_ptr<float>() + c.numel());
  return r;
}

torch::Tensor record_to_tensor(const TensorRecord& r) {
  std::vector<std::int64_t> sizes(r.dims.begin(), r.dims.end());
  return torch::from_blob(const_cast<float*>(r.values.data()), sizes, torch::kFloat32).clone();
}

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data) {
  const auto tmp = path.string() + ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    put_u32(out, kCheckpointVersion);
    const std::string header = data.header.dump();
    put_u32(out, static_cast<std::uint32_t>(header.size()));
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    put_u32(out, static_cast<std::uint32_t>(data.tensors.size()));
    for (const auto& t : data.tensors) {
      put_u32(out, static_cast<std::uint32_t>(t.name.size()));
      out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
      write_tensor_record(out, tensor_to_record(t.value));
    }
    if (!out) throw IoError("failed writing checkpoint " + path.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place: " + ec.message());
}

CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) {
    throw IoError("not a checkpoint file: " + path.string());
  }
  const auto version = get_u32(in);
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  CheckpointData data;
  data.header = nlohmann::json::parse(get_bytes(in, get_u32(in)));
  const auto count = get_u32(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = get_bytes(in, get_u32(in));
    t.value = record_to_tensor(read_tensor_record(in));
    data.tensors.push_back(std::move(t));
  }
  return data;
}

void save_model(const std::filesystem::path& path, const nets::IcamModel& model, nlohmann::json header,
                const std::vector<NamedTensor>& extra) {
  CheckpointData data;
  const nlohmann::json cfg = model.config();
  header["kind"] = header.value("kind", "icam");
  header["model_config"] = cfg;
  header["model_config_hash"] = config_hash(cfg);
  header["version"] = kVersion;
  data.header = std::move(header);
  for (auto& [name, value] : model.named_parameters()) data.tensors.push_back({name, value});
  data.tensors.insert(data.tensors.end(), extra.begin(), extra.end());
  write_checkpoint(path, data);
}

void restore_parameters(const CheckpointData& data,
                        const std::vector<std::pair<std::string, torch::Tensor>>& params) {
  torch::NoGradGuard no_grad;
  for (const auto& [name, value] : params) {
    const auto& stored = data.tensor(name);
    if (stored.sizes() != value.sizes()) throw IoError("parameter shape mismatch for " + name);
    const_cast<torch::Tensor&>(value).copy_(stored);
  }
}

LoadedModel load_model(const std::filesystem::path& path) {
  LoadedModel out;
  out.data = read_checkpoint(path);
  const auto& header = out.data.header;
  if (!header.contains("model_config")) throw IoError("checkpoint has no model_config: " + path.string());
  const auto& cfg_json = header.at("model_config");
  if (config_hash(cfg_json) != header.value("model_config_hash", std::string{})) {
    throw IoError("checkpoint model_config_hash does not match its config: " + path.string());
  }
  out.model = std::make_unique<nets::IcamModel>(cfg_json.get<nets::ModelConfig>());
  restore_parameters(out.data, out.model->named_parameters());
  return out;
}

}  // namespace icam
