#include "sepbn/checkpoint.hpp"

#include <cstring>
#include <fstream>

using nlohmann::json;

namespace sepbn {

namespace {

void write_u64(std::ofstream& out, uint64_t v) {
  char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(buf, 8);
}

uint64_t read_u64(std::ifstream& in) {
  char buf[8];
  in.read(buf, 8);
  if (in.gcount() != 8) throw CheckpointError("truncated header");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[i])) << (8 * i);
  return v;
}

json state_to_json(const RunState& st) {
  return json{{"epoch", st.epoch}, {"tau", st.tau}, {"seed", st.seed}};
}

RunState state_from_json(const json& j) {
  RunState st;
  st.epoch = j.at("epoch").get<int>();
  st.tau = j.at("tau").get<double>();
  st.seed = j.at("seed").get<uint64_t>();
  return st;
}

void save_impl(const std::string& path, const json& model_json, const std::string& kind,
               const std::vector<Tensor*>& model_state, const TrainConfig& train, Sgd& opt,
               const RunState& state) {
  std::vector<const Tensor*> blocks;
  for (Tensor* t : model_state) blocks.push_back(t);
  for (Tensor& v : opt.velocity()) blocks.push_back(&v);

  json sizes = json::array();
  for (const Tensor* t : blocks) sizes.push_back(t->numel());
  json doc{{"format_version", 1},
           {"kind", kind},
           {"model", model_json},
           {"train", train_to_json(train)},
           {"augment", augment_to_json(train.augment)},
           {"state", state_to_json(state)},
           {"blocks", sizes}};
  const std::string header = doc.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  out.write(kCheckpointMagic, 8);
  write_u64(out, header.size());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const Tensor* t : blocks)
    out.write(reinterpret_cast<const char*>(t->data()),
              static_cast<std::streamsize>(t->numel() * sizeof(double)));
  if (!out) throw IoError("write failed for checkpoint '" + path + "'");
}

}  // namespace

void checkpoint_save(const std::string& path, VanillaNet& net, const TrainConfig& train, Sgd& opt,
                     const RunState& state) {
  if (!opt.attached()) opt.attach(net.params());
  save_impl(path, vanilla_to_json(net.config()), "vanilla", net.state_tensors(), train, opt, state);
}

void checkpoint_save(const std::string& path, MultiHeadNet& net, const TrainConfig& train,
                     Sgd& opt, const RunState& state) {
  if (!opt.attached()) opt.attach(net.params());
  save_impl(path, multihead_to_json(net.config()), "multihead", net.state_tensors(), train, opt,
            state);
}

LoadedCheckpoint checkpoint_load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");

  char magic[8];
  in.read(magic, 8);
  if (in.gcount() != 8 || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw CheckpointError("'" + path + "': bad magic, not a checkpoint");
  const uint64_t json_len = read_u64(in);
  std::string header(json_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(json_len));
  if (in.gcount() != static_cast<std::streamsize>(json_len))
    throw CheckpointError("'" + path + "': truncated config");

  json doc;
  try {
    doc = json::parse(header);
  } catch (const json::exception& e) {
    throw CheckpointError("'" + path + "': corrupt config: " + e.what());
  }
  if (doc.value("format_version", -1) != 1)
    throw CheckpointError("'" + path + "': unsupported format version");

  LoadedCheckpoint loaded;
  loaded.config = doc;
  loaded.kind = doc.at("kind").get<std::string>();
  loaded.train = train_from_json(doc.at("train"));
  loaded.train.augment = augment_from_json(doc.at("augment"));
  loaded.state = state_from_json(doc.at("state"));
  loaded.train.seed = loaded.state.seed;

  Rng rng(loaded.state.seed);
  std::vector<Tensor*> model_state;
  if (loaded.kind == "vanilla") {
    loaded.vanilla = std::make_unique<VanillaNet>(vanilla_from_json(doc.at("model")), rng);
    model_state = loaded.vanilla->state_tensors();
  } else if (loaded.kind == "multihead") {
    MultiHeadConfig mc = multihead_from_json(doc.at("model"));
    mc.validate(true);
    loaded.multihead = std::make_unique<MultiHeadNet>(mc, rng, true, true);
    model_state = loaded.multihead->state_tensors();
  } else {
    throw CheckpointError("'" + path + "': unknown model kind '" + loaded.kind + "'");
  }

  loaded.opt = Sgd(loaded.train.optimizer);
  loaded.opt.attach(loaded.params());
  std::vector<Tensor*> blocks = model_state;
  for (Tensor& v : loaded.opt.velocity()) blocks.push_back(&v);

  const auto sizes = doc.at("blocks").get<std::vector<int64_t>>();
  if (sizes.size() != blocks.size())
    throw CheckpointError("'" + path + "': block count mismatch (" + std::to_string(sizes.size()) +
                          " stored, " + std::to_string(blocks.size()) + " expected)");
  for (size_t i = 0; i < blocks.size(); ++i) {
    if (sizes[i] != blocks[i]->numel())
      throw CheckpointError("'" + path + "': block " + std::to_string(i) + " size mismatch");
    in.read(reinterpret_cast<char*>(blocks[i]->data()),
            static_cast<std::streamsize>(blocks[i]->numel() * sizeof(double)));
    if (in.gcount() != static_cast<std::streamsize>(blocks[i]->numel() * sizeof(double)))
      throw CheckpointError("'" + path + "': truncated parameter data");
  }
  in.peek();
  if (!in.eof()) throw CheckpointError("'" + path + "': trailing bytes after parameter data");

  loaded.set_tau();
  return loaded;
}

}  // namespace sepbn
