#include "podom/checkpoint.hpp"

#include <cstring>

#include "binary_io.hpp"

namespace podom {

const ad::Tensor& TensorFile::get(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw IoError("tensor file has no entry named " + name);
}

void write_tensor_file(const std::filesystem::path& path, const TensorFile& file) {
  detail::BinaryWriter out(path);
  out.put_bytes(kTensorFileMagic, 4);
  out.put(kTensorFileVersion);
  out.put(static_cast<std::uint32_t>(file.header.size()));
  out.put_bytes(file.header.data(), file.header.size());
  out.put(static_cast<std::uint32_t>(file.tensors.size()));
  for (std::size_t i = 0; i < file.tensors.size(); ++i) {
    const auto& [name, t] = file.tensors[i];
    out.put(static_cast<std::uint32_t>(name.size()));
    out.put_bytes(name.data(), name.size());
    out.put(static_cast<std::uint8_t>(i < file.trainable.size() ? file.trainable[i] : true));
    out.put(static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) out.put(static_cast<std::uint32_t>(d));
    for (double v : t.values()) out.put(v);
  }
  out.finish();
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
  detail::BinaryReader in(path);
  char magic[4];
  in.get_bytes(magic, 4);
  if (std::memcmp(magic, kTensorFileMagic, 4) != 0) throw IoError("bad tensor-file magic in " + path.string());
  const auto version = in.get<std::uint32_t>();
  if (version != kTensorFileVersion) throw IoError("unsupported tensor-file version " + std::to_string(version));
  TensorFile file;
  file.header.resize(in.get<std::uint32_t>());
  in.get_bytes(file.header.data(), file.header.size());
  const auto count = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(in.get<std::uint32_t>(), '\0');
    in.get_bytes(name.data(), name.size());
    file.trainable.push_back(in.get<std::uint8_t>() != 0);
    const auto rank = in.get<std::uint32_t>();
    std::vector<int> shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(static_cast<int>(in.get<std::uint32_t>()));
    ad::Tensor t(shape);
    for (auto& v : t.values()) v = in.get<double>();
    file.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (!in.at_end()) throw IoError("trailing data in tensor file " + path.string());
  return file;
}

TensorFile to_tensor_file(const ad::ParameterStore& store, std::string header) {
  TensorFile f;
  f.header = std::move(header);
  for (const auto* p : store.all()) {
    f.tensors.emplace_back(p->name, p->value);
    f.trainable.push_back(p->trainable);
  }
  return f;
}

void load_into(ad::ParameterStore& store, const TensorFile& file) {
  if (file.tensors.size() != store.size()) {
    throw ConfigError("checkpoint holds " + std::to_string(file.tensors.size()) + " tensors, model expects " +
                      std::to_string(store.size()));
  }
  for (const auto& [name, t] : file.tensors) {
    if (!store.contains(name)) throw ConfigError("checkpoint tensor not in model: " + name);
    auto& p = store.get(name);
    if (!p.value.same_shape(t)) {
      throw ConfigError("checkpoint shape mismatch for " + name + ": " + ad::shape_string(t.shape()) + " vs " +
                        ad::shape_string(p.value.shape()));
    }
    p.value = t;
  }
}

}  // namespace podom
