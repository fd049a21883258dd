#include <cstring>

#include "textcsp/core/io.hpp"
#include "textcsp/train/train.hpp"

namespace textcsp::train {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'T', 'X', 'C', 'S', 'P', 'C', 'K', '1'};

template <typename T>
const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

struct Archive {
  json meta;
  std::vector<std::uint8_t> bytes;
  std::size_t data_start = 0;
};

Archive open_archive(const std::filesystem::path& path) {
  Archive a;
  a.bytes = io::read_bytes(path);
  const auto fail = [&](const std::string& why) {
    return IncompatibleError("checkpoint " + path.string() + ": " + why);
  };
  if (a.bytes.size() < 16 || std::memcmp(a.bytes.data(), kMagic, 8) != 0) throw fail("not a checkpoint archive");
  std::uint64_t meta_len = 0;
  io::from_little_endian(a.bytes.data() + 8, 1, &meta_len);
  if (meta_len > a.bytes.size() - 16) throw fail("truncated meta block");
  try {
    a.meta = json::parse(a.bytes.begin() + 16, a.bytes.begin() + 16 + static_cast<std::ptrdiff_t>(meta_len));
  } catch (const json::exception& e) {
    throw fail(std::string("bad meta.json: ") + e.what());
  }
  a.data_start = 16 + meta_len;
  return a;
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const nn::ParameterStore<T>& store,
                     const std::vector<Tensor<T>>& velocity, json meta) {
  std::vector<const nn::Parameter<T>*> trainable;
  for (const auto& p : store.params())
    if (p.trainable) trainable.push_back(&p);
  if (!velocity.empty() && velocity.size() != trainable.size())
    throw ShapeError("checkpoint: velocity count does not match the trainable parameters");

  json index = json::array();
  std::size_t offset = 0, k = 0;
  for (const auto& p : store.params()) {
    json e{{"name", p.name}, {"shape", p.var.shape()}, {"trainable", p.trainable}, {"offset", offset}};
    offset += static_cast<std::size_t>(p.var.size());
    if (p.trainable && !velocity.empty()) {
      e["velocity_offset"] = offset;
      offset += static_cast<std::size_t>(velocity[k].size());
    }
    if (p.trainable) ++k;
    index.push_back(std::move(e));
  }
  meta["format"] = "textcsp-checkpoint";
  meta["dtype"] = dtype_name<T>();
  meta["tensors"] = std::move(index);
  meta["has_velocity"] = !velocity.empty();
  const std::string meta_text = meta.dump();

  std::vector<std::uint8_t> out(16 + meta_text.size() + offset * sizeof(T));
  std::memcpy(out.data(), kMagic, 8);
  const std::uint64_t meta_len = meta_text.size();
  io::to_little_endian(&meta_len, 1, out.data() + 8);
  std::memcpy(out.data() + 16, meta_text.data(), meta_text.size());
  std::uint8_t* dst = out.data() + 16 + meta_text.size();
  k = 0;
  for (const auto& p : store.params()) {
    const auto& v = p.var.value();
    io::to_little_endian(v.data(), static_cast<std::size_t>(v.size()), dst);
    dst += v.size() * static_cast<Index>(sizeof(T));
    if (p.trainable && !velocity.empty()) {
      io::to_little_endian(velocity[k].data(), static_cast<std::size_t>(velocity[k].size()), dst);
      dst += velocity[k].size() * static_cast<Index>(sizeof(T));
    }
    if (p.trainable) ++k;
  }
  // Write to a sibling file first so an interrupted save never clobbers the old archive.
  auto tmp = path;
  tmp += ".tmp";
  io::write_bytes(tmp, out.data(), out.size());
  std::filesystem::rename(tmp, path);
}

json read_checkpoint_meta(const std::filesystem::path& path) {
  auto meta = open_archive(path).meta;
  meta.erase("tensors");
  return meta;
}

template <typename T>
json load_checkpoint(const std::filesystem::path& path, nn::ParameterStore<T>& store,
                     std::vector<Tensor<T>>* velocity) {
  Archive a = open_archive(path);
  const auto fail = [&](const std::string& why) {
    return IncompatibleError("checkpoint " + path.string() + ": " + why);
  };
  if (a.meta.value("dtype", "") != dtype_name<T>()) throw fail("dtype " + a.meta.value("dtype", "?") + " expected " +
                                                                dtype_name<T>());
  const std::size_t available = (a.bytes.size() - a.data_start) / sizeof(T);
  std::map<std::string, json> entries;
  for (const auto& e : a.meta.at("tensors")) entries[e.at("name").template get<std::string>()] = e;
  if (entries.size() != store.params().size())
    throw fail("holds " + std::to_string(entries.size()) + " tensors, model has " +
               std::to_string(store.params().size()));

  const bool has_velocity = a.meta.value("has_velocity", false);
  std::vector<Tensor<T>> vel;
  for (auto& p : store.params()) {
    auto it = entries.find(p.name);
    if (it == entries.end()) throw fail("missing tensor '" + p.name + "'");
    const auto& e = it->second;
    if (e.at("shape").template get<Shape>() != p.var.shape())
      throw fail("tensor '" + p.name + "' has shape " + shape_str(e.at("shape").template get<Shape>()) + ", model expects " +
                 shape_str(p.var.shape()));
    if (e.at("trainable").template get<bool>() != p.trainable) throw fail("trainable flag differs for '" + p.name + "'");
    const auto read_at = [&](std::size_t off, Tensor<T>& dst) {
      if (off + static_cast<std::size_t>(dst.size()) > available) throw fail("truncated tensor data");
      io::from_little_endian(a.bytes.data() + a.data_start + off * sizeof(T), static_cast<std::size_t>(dst.size()),
                             dst.data());
    };
    read_at(e.at("offset").template get<std::size_t>(), p.var.mutable_value());
    if (p.trainable && has_velocity) {
      Tensor<T> v(p.var.shape());
      read_at(e.at("velocity_offset").template get<std::size_t>(), v);
      vel.push_back(std::move(v));
    }
  }
  if (velocity) *velocity = std::move(vel);
  a.meta.erase("tensors");
  return a.meta;
}

template void save_checkpoint<float>(const std::filesystem::path&, const nn::ParameterStore<float>&,
                                     const std::vector<Tensor<float>>&, json);
template void save_checkpoint<double>(const std::filesystem::path&, const nn::ParameterStore<double>&,
                                      const std::vector<Tensor<double>>&, json);
template json load_checkpoint<float>(const std::filesystem::path&, nn::ParameterStore<float>&,
                                     std::vector<Tensor<float>>*);
template json load_checkpoint<double>(const std::filesystem::path&, nn::ParameterStore<double>&,
                                      std::vector<Tensor<double>>*);

}  // namespace textcsp::train
