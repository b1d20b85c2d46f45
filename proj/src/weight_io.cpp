#include "smap/weight_io.h"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "json.hpp"

namespace smap {

namespace {

using nlohmann::json;

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
  }
}

template <typename T>
T get_le(const unsigned char* p) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(p[i]) << (8 * i);
  return v;
}

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path);
  return bytes;
}

json config_to_json(const ModelConfig& c) {
  return json{{"vocab_size", c.vocab_size},   {"d_model", c.d_model},
              {"n_layers", c.n_layers},       {"n_heads", c.n_heads},
              {"d_ff", c.d_ff},               {"max_seq_len", c.max_seq_len},
              {"norm_eps", c.norm_eps},       {"rope_theta", c.rope_theta},
              {"tied_embeddings", c.tied_embeddings}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.norm_eps = j.at("norm_eps").get<float>();
  c.rope_theta = j.at("rope_theta").get<float>();
  c.tied_embeddings = j.at("tied_embeddings").get<bool>();
  return c;
}

struct Parsed {
  ModelFileHeader header;
  std::size_t payload_start = 0;
};

Parsed parse_header(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kModelMagic, 4) != 0) throw BadMagicError();
  if (bytes.size() < 8) throw TruncatedPayloadError("file ends inside the version field");
  Parsed p;
  p.header.version = get_le<std::uint32_t>(bytes.data() + 4);
  if (p.header.version != kModelVersion) throw UnsupportedVersionError(p.header.version);
  if (bytes.size() < 16) throw TruncatedPayloadError("file ends inside the header length");
  const auto header_len = get_le<std::uint64_t>(bytes.data() + 8);
  if (header_len > bytes.size() - 16) throw TruncatedPayloadError("file ends inside the header");
  p.payload_start = 16 + static_cast<std::size_t>(header_len);

  json j;
  try {
    j = json::parse(bytes.begin() + 16, bytes.begin() + static_cast<std::ptrdiff_t>(p.payload_start));
    p.header.config = config_from_json(j.at("config"));
    for (const auto& t : j.at("tensors")) {
      p.header.tensors.push_back({t.at("name").get<std::string>(),
                                  t.at("shape").get<std::vector<std::uint64_t>>(),
                                  t.at("offset").get<std::uint64_t>()});
    }
  } catch (const json::exception& e) {
    throw ModelFormatError(std::string("malformed header: ") + e.what());
  }
  try {
    p.header.config.validate();
  } catch (const std::invalid_argument& e) {
    throw ModelFormatError(e.what());
  }
  return p;
}

void append_floats(std::string& out, std::span<const float> values) {
  for (float f : values) put_le(out, std::bit_cast<std::uint32_t>(f));
}

}  // namespace

std::uint64_t TensorEntry::elements() const {
  std::uint64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::vector<TensorEntry> tensor_manifest(const ModelConfig& c) {
  std::vector<TensorEntry> m;
  std::uint64_t offset = 0;
  auto add = [&](std::string name, std::vector<std::uint64_t> shape) {
    m.push_back({std::move(name), std::move(shape), offset});
    offset += m.back().elements() * sizeof(float);
  };
  add("tok_embeddings", {c.vocab_size, c.d_model});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    add(p + "attn_norm", {c.d_model});
    add(p + "attn_q", {c.d_model, c.d_model});
    add(p + "attn_k", {c.d_model, c.d_model});
    add(p + "attn_v", {c.d_model, c.d_model});
    add(p + "attn_o", {c.d_model, c.d_model});
    add(p + "ffn_norm", {c.d_model});
    add(p + "ffn_gate", {c.d_ff, c.d_model});
    add(p + "ffn_up", {c.d_ff, c.d_model});
    add(p + "ffn_down", {c.d_model, c.d_ff});
  }
  add("final_norm", {c.d_model});
  if (!c.tied_embeddings) add("output", {c.vocab_size, c.d_model});
  return m;
}

ModelFileHeader read_model_header(const std::string& path) {
  return parse_header(read_file(path)).header;
}

ModelWeights load_model(const std::string& path) {
  const auto bytes = read_file(path);
  const Parsed parsed = parse_header(bytes);
  const ModelConfig& c = parsed.header.config;
  const auto expected = tensor_manifest(c);

  std::uint64_t next_offset = 0;
  for (const TensorEntry& t : parsed.header.tensors) {
    if (t.offset != next_offset) {
      throw ModelFormatError("tensor " + t.name + " at offset " + std::to_string(t.offset) +
                             ", expected " + std::to_string(next_offset));
    }
    next_offset += t.elements() * sizeof(float);
  }
  for (const TensorEntry& want : expected) {
    bool found = false;
    for (const TensorEntry& t : parsed.header.tensors) {
      if (t.name != want.name) continue;
      found = true;
      if (t.shape != want.shape) {
        std::string got, exp;
        for (auto d : t.shape) got += (got.empty() ? "" : ",") + std::to_string(d);
        for (auto d : want.shape) exp += (exp.empty() ? "" : ",") + std::to_string(d);
        throw TensorShapeError("tensor " + t.name + " has shape [" + got + "], config implies [" +
                               exp + "]");
      }
    }
    if (!found) throw MissingTensorError("missing tensor " + want.name);
  }
  if (parsed.header.tensors.size() != expected.size()) {
    throw ModelFormatError("manifest lists " + std::to_string(parsed.header.tensors.size()) +
                           " tensors, config implies " + std::to_string(expected.size()));
  }

  const std::uint64_t payload = bytes.size() - parsed.payload_start;
  if (payload < next_offset) {
    throw TruncatedPayloadError("expected " + std::to_string(next_offset) + " bytes, found " +
                                std::to_string(payload));
  }
  if (payload > next_offset) {
    throw ModelFormatError("payload has " + std::to_string(payload - next_offset) +
                           " trailing bytes");
  }

  auto read_floats = [&](const std::string& name) {
    for (const TensorEntry& t : parsed.header.tensors) {
      if (t.name != name) continue;
      std::vector<float> v(t.elements());
      const unsigned char* p = bytes.data() + parsed.payload_start + t.offset;
      for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = std::bit_cast<float>(get_le<std::uint32_t>(p + 4 * i));
      }
      return v;
    }
    throw MissingTensorError("missing tensor " + name);
  };
  auto read_matrix = [&](const std::string& name, std::size_t rows, std::size_t cols) {
    return Matrix(rows, cols, read_floats(name));
  };

  ModelWeights w;
  w.config = c;
  w.token_embedding = read_matrix("tok_embeddings", c.vocab_size, c.d_model);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    LayerWeights lw;
    lw.attn_norm = read_floats(p + "attn_norm");
    lw.attn_q = read_matrix(p + "attn_q", c.d_model, c.d_model);
    lw.attn_k = read_matrix(p + "attn_k", c.d_model, c.d_model);
    lw.attn_v = read_matrix(p + "attn_v", c.d_model, c.d_model);
    lw.attn_o = read_matrix(p + "attn_o", c.d_model, c.d_model);
    lw.ffn_norm = read_floats(p + "ffn_norm");
    lw.ffn_gate = read_matrix(p + "ffn_gate", c.d_ff, c.d_model);
    lw.ffn_up = read_matrix(p + "ffn_up", c.d_ff, c.d_model);
    lw.ffn_down = read_matrix(p + "ffn_down", c.d_model, c.d_ff);
    w.layers.push_back(std::move(lw));
  }
  w.final_norm = read_floats("final_norm");
  if (!c.tied_embeddings) w.unembedding = read_matrix("output", c.vocab_size, c.d_model);
  try {
    w.validate();
  } catch (const std::exception& e) {
    throw ModelFormatError(e.what());
  }
  return w;
}

void save_model(const std::string& path, const ModelWeights& weights) {
  weights.validate();
  const ModelConfig& c = weights.config;
  const auto manifest = tensor_manifest(c);

  json tensors = json::array();
  for (const TensorEntry& t : manifest) {
    tensors.push_back(json{{"name", t.name}, {"shape", t.shape}, {"offset", t.offset}});
  }
  const std::string header = json{{"config", config_to_json(c)}, {"tensors", tensors}}.dump();

  std::string out(kModelMagic, 4);
  put_le(out, kModelVersion);
  put_le(out, static_cast<std::uint64_t>(header.size()));
  out += header;
  append_floats(out, weights.token_embedding.data());
  for (const LayerWeights& lw : weights.layers) {
    append_floats(out, lw.attn_norm);
    append_floats(out, lw.attn_q.data());
    append_floats(out, lw.attn_k.data());
    append_floats(out, lw.attn_v.data());
    append_floats(out, lw.attn_o.data());
    append_floats(out, lw.ffn_norm);
    append_floats(out, lw.ffn_gate.data());
    append_floats(out, lw.ffn_up.data());
    append_floats(out, lw.ffn_down.data());
  }
  append_floats(out, weights.final_norm);
  if (!c.tied_embeddings) append_floats(out, weights.unembedding.data());

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  f.flush();
  if (!f) throw IoError("write failed: " + path);
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.size() < 3) {
    throw std::invalid_argument("vocabulary needs at least the three reserved specials");
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      throw std::invalid_argument("duplicate vocabulary token '" + tokens_[i] + "'");
    }
    if (i > kUnk) longest_ = std::max(longest_, tokens_[i].size());
  }
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  json j;
  try {
    in >> j;
    return Vocabulary(j.get<std::vector<std::string>>());
  } catch (const json::exception& e) {
    throw std::invalid_argument("malformed vocabulary " + path + ": " + e.what());
  }
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << json(tokens_).dump() << '\n';
  if (!out) throw IoError("write failed: " + path);
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id >= tokens_.size()) {
    throw IndexError("token id " + std::to_string(id) + " out of range for vocabulary of " +
                     std::to_string(tokens_.size()));
  }
  return tokens_[id];
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  const auto it = index_.find(std::string(token));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::vector<TokenId> Vocabulary::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  std::size_t pos = 0;
  std::string probe;
  while (pos < text.size()) {
    bool matched = false;
    for (std::size_t len = std::min(longest_, text.size() - pos); len > 0; --len) {
      probe.assign(text.substr(pos, len));
      const auto it = index_.find(probe);
      if (it != index_.end() && it->second > kUnk) {
        ids.push_back(it->second);
        pos += len;
        matched = true;
        break;
      }
    }
    if (!matched) {
      ids.push_back(kUnk);
      ++pos;
    }
  }
  return ids;
}

std::string Vocabulary::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) out += token(id);
  return out;
}

Vocabulary make_toy_vocabulary(std::size_t size) {
  static const char* const kWords[] = {
      " the", " a",     " is",    " of",    " and",   " in",     " on",    " with",  " there",
      " image", " picture", " photo", " shows", " man",   " woman",  " person", " people",
      " dog",  " cat",   " car",   " bus",   " truck", " bike",   " horse", " bird",  " tree",
      " table", " chair", " cup",  " bottle", " plate", " pizza", " cake",  " phone", " laptop",
      " book", " clock", " street", " sign",  " light", " sky",    " grass", " water", " boat",
      " train", " road", " field", " room",  " kitchen", " bed",   " couch", " window", " door",
      " red",  " blue",  " green", " white", " black", " yellow", " small", " large", " two",
      " three", " one",  " yes",   " no",    " are",   " it",     " this",  " that",  " near",
      " next", " to",    " sitting", " standing", " holding", " playing", " riding", " eating",
      " Is",   " Are",   " What",  " How",   " many",  " color",  " object", " objects",
      " describe", " detail", " answer", " question", " single", " word", " phrase", " Please",
  };
  std::vector<std::string> tokens{"<pad>", "</s>", "<unk>"};
  std::set<std::string> seen(tokens.begin(), tokens.end());
  auto push = [&](std::string s) {
    if (tokens.size() < size && seen.insert(s).second) tokens.push_back(std::move(s));
  };
  for (char ch = 32; ch < 127; ++ch) push(std::string(1, ch));
  for (const char* w : kWords) push(w);
  for (char a = 'a'; a <= 'z' && tokens.size() < size; ++a) {
    for (char b = 'a'; b <= 'z' && tokens.size() < size; ++b) push(std::string{a, b});
  }
  if (tokens.size() < size) throw std::invalid_argument("toy vocabulary size too large");
  return Vocabulary(std::move(tokens));
}

}  // namespace smap
