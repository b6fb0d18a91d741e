#include <cstring>
#include <filesystem>
#include <unordered_map>

#include "l3/model.hpp"
#include "l3/serialize.hpp"

namespace l3 {

namespace {

constexpr char kMagic[4] = {'L', '3', 'C', 'K'};
constexpr uint32_t kVersion = 1;
constexpr uint64_t kAlign = 64;

uint64_t align_up(uint64_t x) { return (x + kAlign - 1) / kAlign * kAlign; }

struct HeaderInfo {
  ModelConfig config;
  std::shared_ptr<AllocationTable> alloc;  // null when the model has no L3 layers
  int scalar_bytes = 0;
  CheckpointLayout layout;
  uint64_t trailer_offset = 0;
};

HeaderInfo read_header(BinaryReader& r, const std::string& path) {
  HeaderInfo h;
  r.expect_magic(kMagic);
  check(r.u32() == kVersion, ErrorKind::Format, "unsupported checkpoint version: " + path);
  h.config = ModelConfig::from_json(r.str());
  const uint8_t has_alloc = r.pod<uint8_t>();
  if (has_alloc) {
    auto t = std::make_shared<AllocationTable>();
    t->vocab_size = static_cast<int32_t>(r.u32());
    check(t->vocab_size > 0 && t->vocab_size <= (1 << 24), ErrorKind::Format,
          "implausible allocation vocab");
    t->total = static_cast<int64_t>(r.u64());
    t->cap = r.u32();
    r.vec(t->d, static_cast<size_t>(t->vocab_size));
    t->bounds.resize(t->d.size() + 1);
    t->bounds[0] = 0;
    for (size_t i = 0; i < t->d.size(); ++i) t->bounds[i + 1] = t->bounds[i] + t->d[i];
    t->validate();
    h.alloc = std::move(t);
  }
  h.scalar_bytes = r.pod<uint8_t>();
  check(h.scalar_bytes == 4 || h.scalar_bytes == 8, ErrorKind::Format,
        "bad scalar width in checkpoint");
  const uint32_t n_tensors = r.u32();
  check(n_tensors < (1u << 20), ErrorKind::Format, "implausible tensor count");
  h.layout.scalar_bytes = h.scalar_bytes;
  uint64_t end = 0;
  for (uint32_t i = 0; i < n_tensors; ++i) {
    CheckpointLayout::Entry e;
    e.name = r.str(4096);
    const uint32_t nd = r.u32();
    check(nd <= 4, ErrorKind::Format, "implausible tensor rank");
    int64_t numel = 1;
    for (uint32_t dj = 0; dj < nd; ++dj) {
      e.shape.push_back(r.i64());
      check(e.shape.back() > 0, ErrorKind::Format, "non-positive tensor dimension");
      numel *= e.shape.back();
    }
    e.offset = r.u64();
    e.bytes = static_cast<uint64_t>(numel) * static_cast<uint64_t>(h.scalar_bytes);
    check(e.offset + e.bytes <= r.size(), ErrorKind::Format, "tensor data beyond end of file");
    end = std::max(end, e.offset + e.bytes);
    h.layout.entries.push_back(std::move(e));
  }
  h.trailer_offset = end;
  return h;
}

}  // namespace

const CheckpointLayout::Entry* CheckpointLayout::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

template <typename T>
void save_checkpoint(const std::string& path, Model<T>& model, const OptimizerState<T>* opt,
                     int64_t step, uint64_t rng_state) {
  auto named = model.named_parameters();
  const std::string cfg_json = model.config().to_json();
  const auto& alloc = model.allocation();

  // header + manifest size, so blob offsets are known up front
  uint64_t pos = 4 + 4 + (4 + cfg_json.size()) + 1;
  if (alloc) pos += 4 + 8 + 4 + alloc->d.size() * sizeof(int32_t);
  pos += 1 + 4;
  for (auto& [name, p] : named) pos += 4 + name.size() + 4 + 8 * p.shape().size() + 8;

  std::vector<uint64_t> offsets;
  offsets.reserve(named.size());
  for (auto& [name, p] : named) {
    pos = align_up(pos);
    offsets.push_back(pos);
    pos += static_cast<uint64_t>(p.numel()) * sizeof(T);
  }

  BinaryWriter w(path);
  w.magic(kMagic);
  w.u32(kVersion);
  w.str(cfg_json);
  w.pod<uint8_t>(alloc ? 1 : 0);
  if (alloc) {
    w.u32(static_cast<uint32_t>(alloc->vocab_size));
    w.u64(static_cast<uint64_t>(alloc->total));
    w.u32(alloc->cap);
    w.vec(alloc->d);
  }
  w.pod<uint8_t>(static_cast<uint8_t>(sizeof(T)));
  w.u32(static_cast<uint32_t>(named.size()));
  for (size_t i = 0; i < named.size(); ++i) {
    auto& [name, p] = named[i];
    w.str(name);
    w.u32(static_cast<uint32_t>(p.shape().size()));
    for (int64_t dj : p.shape()) w.i64(dj);
    w.u64(offsets[i]);
  }
  for (size_t i = 0; i < named.size(); ++i) {
    auto& [name, p] = named[i];
    while (w.tell() < offsets[i]) w.pod<uint8_t>(0);
    w.vec(p.values());
  }

  w.i64(step);
  w.u64(rng_state);
  w.pod<uint8_t>(opt ? 1 : 0);
  if (opt) {
    check(opt->m.size() == named.size(), ErrorKind::Dimension,
          "optimizer state does not match the parameter list");
    w.i64(opt->step);
    w.f64(opt->cfg.lr);
    w.f64(opt->cfg.beta1);
    w.f64(opt->cfg.beta2);
    w.f64(opt->cfg.eps);
    w.f64(opt->cfg.weight_decay);
    for (size_t i = 0; i < named.size(); ++i) {
      w.vec(opt->m[i]);
      w.vec(opt->v[i]);
    }
  }
  w.close();
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  BinaryReader r(path);
  HeaderInfo h = read_header(r, path);
  check(h.scalar_bytes == static_cast<int>(sizeof(T)), ErrorKind::Format,
        "checkpoint precision does not match the requested scalar type");

  LoadedCheckpoint<T> out;
  out.model = std::make_unique<Model<T>>(h.config, h.alloc);
  auto named = out.model->named_parameters();
  check(named.size() == h.layout.entries.size(), ErrorKind::Format,
        "checkpoint tensor list does not match the model");

  std::ifstream is(path, std::ios::binary);
  uint64_t trailer = h.trailer_offset;
  for (size_t i = 0; i < named.size(); ++i) {
    auto& [name, p] = named[i];
    const auto& e = h.layout.entries[i];
    check(e.name == name, ErrorKind::Format, "unexpected tensor name: " + e.name);
    check(e.shape == p.shape(), ErrorKind::Format, "tensor shape mismatch: " + e.name);
    is.seekg(static_cast<std::streamoff>(e.offset));
    is.read(reinterpret_cast<char*>(p.data()), static_cast<std::streamsize>(e.bytes));
    check(is.good(), ErrorKind::Format, "truncated tensor data: " + e.name);
  }

  is.seekg(static_cast<std::streamoff>(trailer));
  auto read_pod = [&is, &path](auto& v) {
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    check(is.good(), ErrorKind::Format, "truncated checkpoint trailer: " + path);
  };
  read_pod(out.step);
  read_pod(out.rng_state);
  uint8_t has_opt = 0;
  read_pod(has_opt);
  if (has_opt) {
    OptimizerState<T> st;
    read_pod(st.step);
    read_pod(st.cfg.lr);
    read_pod(st.cfg.beta1);
    read_pod(st.cfg.beta2);
    read_pod(st.cfg.eps);
    read_pod(st.cfg.weight_decay);
    for (size_t i = 0; i < named.size(); ++i) {
      const size_t n = static_cast<size_t>(named[i].second.numel());
      st.m.emplace_back(n);
      st.v.emplace_back(n);
      is.read(reinterpret_cast<char*>(st.m.back().data()),
              static_cast<std::streamsize>(n * sizeof(T)));
      is.read(reinterpret_cast<char*>(st.v.back().data()),
              static_cast<std::streamsize>(n * sizeof(T)));
      check(is.good(), ErrorKind::Format, "truncated optimizer state: " + path);
    }
    out.opt = std::move(st);
  }
  return out;
}

ModelConfig peek_checkpoint_config(const std::string& path) {
  BinaryReader r(path);
  return read_header(r, path).config;
}

std::shared_ptr<AllocationTable> peek_checkpoint_allocation(const std::string& path) {
  BinaryReader r(path);
  return read_header(r, path).alloc;
}

CheckpointLayout read_checkpoint_layout(const std::string& path) {
  BinaryReader r(path);
  return read_header(r, path).layout;
}

template void save_checkpoint<float>(const std::string&, Model<float>&,
                                     const OptimizerState<float>*, int64_t, uint64_t);
template void save_checkpoint<double>(const std::string&, Model<double>&,
                                      const OptimizerState<double>*, int64_t, uint64_t);
template LoadedCheckpoint<float> load_checkpoint<float>(const std::string&);
template LoadedCheckpoint<double> load_checkpoint<double>(const std::string&);

}  // namespace l3
