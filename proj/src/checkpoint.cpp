#include "jstts/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "jstts/error.hpp"

namespace jstts {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr char kMagic[8] = {'J', 'S', 'T', 'T', 'S', 'C', 'K', '\0'};

void put_u64(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

uint64_t get_u64(std::istream& is, const fs::path& path) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw ValueError("checkpoint " + path.string() + " is truncated");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
  return v;
}

json config_json(const ModelConfig& c) {
  return {{"d_sig", c.d_sig},         {"d_feat", c.d_feat},
          {"hidden", c.hidden},       {"joint", c.joint},
          {"pred_embed", c.pred_embed}, {"s2f_layers", c.s2f_layers},
          {"shared_layers", c.shared_layers}, {"text_layers", c.text_layers},
          {"decoder_layers", c.decoder_layers}, {"refinements", c.refinements},
          {"vae_dim", c.vae_dim},     {"id_embed", c.id_embed},
          {"n_langs", c.n_langs},     {"n_spks", c.n_spks},
          {"code_dim", c.code_dim},   {"codebook_size", c.codebook_size},
          {"cfg_dropout_prob", c.cfg_dropout_prob}};
}

ModelConfig config_from(const json& j) {
  ModelConfig c;
  c.d_sig = j.at("d_sig");
  c.d_feat = j.at("d_feat");
  c.hidden = j.at("hidden");
  c.joint = j.at("joint");
  c.pred_embed = j.at("pred_embed");
  c.s2f_layers = j.at("s2f_layers");
  c.shared_layers = j.at("shared_layers");
  c.text_layers = j.at("text_layers");
  c.decoder_layers = j.at("decoder_layers");
  c.refinements = j.at("refinements");
  c.vae_dim = j.at("vae_dim");
  c.id_embed = j.at("id_embed");
  c.n_langs = j.at("n_langs");
  c.n_spks = j.at("n_spks");
  c.code_dim = j.at("code_dim");
  c.codebook_size = j.at("codebook_size");
  c.cfg_dropout_prob = j.at("cfg_dropout_prob");
  return c;
}

IdRegistry registry_from_map(const std::map<std::string, int>& langs, const std::map<std::string, int>& spks) {
  auto ordered = [](const std::map<std::string, int>& m) {
    std::vector<std::pair<int, std::string>> v;
    for (const auto& [k, id] : m) v.emplace_back(id, k);
    std::sort(v.begin(), v.end());
    return v;
  };
  IdRegistry reg;
  for (const auto& [id, name] : ordered(langs)) {
    if (reg.add_language(name).value != id) throw ValueError("checkpoint: language ids are not dense");
  }
  for (const auto& [id, name] : ordered(spks)) {
    if (reg.add_speaker(name).value != id) throw ValueError("checkpoint: speaker ids are not dense");
  }
  return reg;
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t.value;
  return nullptr;
}

void write_checkpoint(const fs::path& path, const Checkpoint& ck) {
  json h;
  h["stage"] = ck.stage;
  h["step"] = ck.step;
  h["model_config"] = config_json(ck.model_config);
  h["registry"] = {{"languages", ck.registry.languages()}, {"speakers", ck.registry.speakers()}};
  h["meta"] = ck.meta;
  h["tensors"] = json::array();
  for (const auto& t : ck.tensors) h["tensors"].push_back({{"name", t.name}, {"group", t.group}, {"shape", t.value.shape()}});
  const std::string header = h.dump();

  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw StateError("cannot write checkpoint " + tmp.string());
    os.write(kMagic, sizeof kMagic);
    put_u64(os, kCheckpointVersion);
    put_u64(os, header.size());
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& t : ck.tensors) {
      for (double v : t.value.values()) {
        uint64_t bits;
        std::memcpy(&bits, &v, 8);
        put_u64(os, bits);
      }
    }
    os.flush();
    if (!os) throw StateError("short write on checkpoint " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint read_checkpoint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw StateError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw ValueError(path.string() + " is not a checkpoint file");
  }
  const uint64_t version = get_u64(is, path);
  if (version != kCheckpointVersion) {
    throw ValueError("checkpoint " + path.string() + " has format version " + std::to_string(version) + ", expected " +
                     std::to_string(kCheckpointVersion));
  }
  const uint64_t hlen = get_u64(is, path);
  std::string header(hlen, '\0');
  if (!is.read(header.data(), static_cast<std::streamsize>(hlen))) throw ValueError("checkpoint header truncated");
  const json h = json::parse(header);
  Checkpoint ck;
  ck.stage = h.at("stage");
  ck.step = h.at("step");
  ck.model_config = config_from(h.at("model_config"));
  ck.registry = registry_from_map(h.at("registry").at("languages").get<std::map<std::string, int>>(),
                                  h.at("registry").at("speakers").get<std::map<std::string, int>>());
  ck.meta = h.at("meta").get<std::map<std::string, std::string>>();
  for (const auto& tj : h.at("tensors")) {
    NamedTensor t;
    t.name = tj.at("name");
    t.group = tj.at("group");
    t.value = Tensor(tj.at("shape").get<Shape>());
    for (double& v : t.value.values()) {
      const uint64_t bits = get_u64(is, path);
      std::memcpy(&v, &bits, 8);
    }
    ck.tensors.push_back(std::move(t));
  }
  return ck;
}

void store_model(Checkpoint& ck, const Model& model) {
  ck.model_config = model.config();
  for (const Parameter& p : model.params().entries()) {
    ck.tensors.push_back({p.name, group_name(model.params().group_of(p)), p.value});
  }
  ck.meta["vocoder_frozen"] = model.vocoder().frozen() ? "1" : "0";
  std::string langs;
  for (int l : model.tts_trained_langs()) langs += (langs.empty() ? "" : ",") + std::to_string(l);
  ck.meta["tts_trained_langs"] = langs;
}

void load_model(const Checkpoint& ck, Model& model) {
  if (!(model.config() == ck.model_config)) throw ValueError("checkpoint model config does not match the model");
  for (Parameter* p : model.params().all()) {
    const Tensor* t = ck.find(p->name);
    if (!t) throw ValueError("checkpoint is missing parameter " + p->name);
    if (!t->same_shape(p->value)) {
      throw ValueError("checkpoint parameter " + p->name + " has shape " + shape_str(t->shape()) + ", model expects " +
                       shape_str(p->value.shape()));
    }
    p->value = *t;
  }
  auto it = ck.meta.find("vocoder_frozen");
  model.vocoder().set_frozen(it != ck.meta.end() && it->second == "1");
  model.tts_trained_langs().clear();
  it = ck.meta.find("tts_trained_langs");
  if (it != ck.meta.end() && !it->second.empty()) {
    size_t pos = 0;
    while (pos <= it->second.size()) {
      const size_t comma = std::min(it->second.find(',', pos), it->second.size());
      model.tts_trained_langs().insert(std::stoi(it->second.substr(pos, comma - pos)));
      pos = comma + 1;
    }
  }
}

void store_optim(Checkpoint& ck, const std::string& prefix, const std::vector<Parameter*>& params, const AdamState& st) {
  for (size_t i = 0; i < params.size(); ++i) {
    ck.tensors.push_back({prefix + ".m." + params[i]->name, "optim", st.first_moment[i]});
    ck.tensors.push_back({prefix + ".v." + params[i]->name, "optim", st.second_moment[i]});
  }
  ck.meta[prefix + ".step"] = std::to_string(st.step_count);
}

bool load_optim(const Checkpoint& ck, const std::string& prefix, const std::vector<Parameter*>& params, AdamState& st) {
  auto it = ck.meta.find(prefix + ".step");
  if (it == ck.meta.end()) return false;
  for (size_t i = 0; i < params.size(); ++i) {
    const Tensor* m = ck.find(prefix + ".m." + params[i]->name);
    const Tensor* v = ck.find(prefix + ".v." + params[i]->name);
    if (!m || !v) throw ValueError("checkpoint optimizer state incomplete for " + params[i]->name);
    st.first_moment[i] = *m;
    st.second_moment[i] = *v;
  }
  st.step_count = std::stoll(it->second);
  return true;
}

uint64_t group_checksum(const Checkpoint& ck, Group g) {
  uint64_t h = 1469598103934665603ULL;
  const std::string name = group_name(g);
  for (const auto& t : ck.tensors)
    if (t.group == name) h = checksum(t.value, h);
  return h;
}

}  // namespace jstts
