#include "duplex/dataset_io.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

#include "duplex/errors.hpp"

namespace duplex::pairs {

using json = nlohmann::json;

namespace {

json tokens_to_json(const stream::Multistream& s) {
  json text = json::array();
  for (Eigen::Index t = 0; t < s.frames(); ++t) text.push_back(s.text(t));
  json model = json::array();
  json user = json::array();
  for (Eigen::Index t = 0; t < s.frames(); ++t)
    for (int q = 0; q < stream::kLevels; ++q) {
      model.push_back(s.model_audio(t, q));
      user.push_back(s.user_audio(t, q));
    }
  return json{{"text", std::move(text)},
              {"model_audio", std::move(model)},
              {"user_audio", std::move(user)}};
}

stream::Multistream tokens_from_json(const json& node, std::int32_t pad_id,
                                     std::int32_t silence_audio_id) {
  const auto& text = node.at("text");
  const auto frames = static_cast<Eigen::Index>(text.size());
  stream::Multistream s;
  s.pad_id = pad_id;
  s.silence_audio_id = silence_audio_id;
  s.text.resize(frames);
  s.model_audio.resize(frames, stream::kLevels);
  s.user_audio.resize(frames, stream::kLevels);
  for (Eigen::Index t = 0; t < frames; ++t)
    s.text(t) = text.at(static_cast<std::size_t>(t)).get<std::int32_t>();
  const auto& model = node.at("model_audio");
  const auto& user = node.at("user_audio");
  if (static_cast<Eigen::Index>(model.size()) != frames * stream::kLevels ||
      static_cast<Eigen::Index>(user.size()) != frames * stream::kLevels)
    throw SchemaError(SchemaError::Code::OutOfRange,
                      "dataset: audio array size mismatch");
  std::size_t i = 0;
  for (Eigen::Index t = 0; t < frames; ++t)
    for (int q = 0; q < stream::kLevels; ++q, ++i) {
      s.model_audio(t, q) = model.at(i).get<std::int32_t>();
      s.user_audio(t, q) = user.at(i).get<std::int32_t>();
    }
  return s;
}

json mask_to_json(const std::vector<std::uint8_t>& mask) {
  json out = json::array();
  for (std::uint8_t m : mask) out.push_back(static_cast<int>(m));
  return out;
}

std::vector<std::uint8_t> mask_from_json(const json& node) {
  std::vector<std::uint8_t> mask;
  mask.reserve(node.size());
  for (const auto& v : node)
    mask.push_back(static_cast<std::uint8_t>(v.get<int>() != 0));
  return mask;
}

}  // namespace

void write_dataset(std::ostream& out, const PreferenceDataset& ds,
                   const stream::TokenizerConfig& tcfg) {
  json header{{"format", kDatasetFormat},
              {"version", kDatasetVersion},
              {"split", ds.split},
              {"pairs", ds.pairs.size()},
              {"frame_rate", stream::kFrameRate},
              {"levels", stream::kLevels},
              {"audio_vocab", stream::kAudioVocab},
              {"text_vocab", stream::kTextVocab},
              {"pad_id", tcfg.pad_id},
              {"silence_audio_id", tcfg.silence_audio_id}};
  out << header.dump() << '\n';

  for (const auto& pair : ds.pairs) {
    json categories = json::array();
    for (auto c : pair.categories) categories.push_back(judge::category_name(c));
    json record{{"id", pair.id},
                {"categories", std::move(categories)},
                {"unique_context", pair.unique_context},
                {"context", tokens_to_json(pair.context)},
                {"winner", tokens_to_json(pair.winner)},
                {"loser", tokens_to_json(pair.loser)},
                {"winner_mask", mask_to_json(pair.winner_mask)},
                {"loser_mask", mask_to_json(pair.loser_mask)},
                {"lengths", {pair.winner_len(), pair.loser_len()}}};
    out << record.dump() << '\n';
  }
}

void save_dataset(const std::string& path, const PreferenceDataset& ds,
                  const stream::TokenizerConfig& tcfg) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write dataset file " + path);
  write_dataset(out, ds, tcfg);
}

PreferenceDataset read_dataset(std::istream& in) {
  std::string line;
  if (!std::getline(in, line))
    throw SchemaError(SchemaError::Code::MissingField, "dataset: empty file");
  json header;
  try {
    header = json::parse(line);
  } catch (const json::parse_error& e) {
    throw SchemaError(SchemaError::Code::MalformedJson,
                      std::string("dataset header: ") + e.what());
  }
  if (header.value("format", "") != kDatasetFormat)
    throw SchemaError(SchemaError::Code::OutOfRange,
                      "dataset: unrecognized format");
  if (header.value("version", -1) != kDatasetVersion)
    throw SchemaError(SchemaError::Code::OutOfRange,
                      "dataset: unsupported version");
  const auto pad_id = header.at("pad_id").get<std::int32_t>();
  const auto silence_id = header.at("silence_audio_id").get<std::int32_t>();

  PreferenceDataset ds;
  ds.split = header.value("split", "pool");
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json record;
    try {
      record = json::parse(line);
    } catch (const json::parse_error& e) {
      throw SchemaError(SchemaError::Code::MalformedJson,
                        "dataset line " + std::to_string(line_no) + ": " +
                            e.what());
    }
    PreferencePair pair;
    pair.id = record.at("id").get<std::string>();
    for (const auto& c : record.at("categories"))
      pair.categories.insert(judge::category_from_name(c.get<std::string>()));
    pair.unique_context = record.value("unique_context", true);
    pair.context = tokens_from_json(record.at("context"), pad_id, silence_id);
    pair.winner = tokens_from_json(record.at("winner"), pad_id, silence_id);
    pair.loser = tokens_from_json(record.at("loser"), pad_id, silence_id);
    pair.winner_mask = mask_from_json(record.at("winner_mask"));
    pair.loser_mask = mask_from_json(record.at("loser_mask"));
    if (static_cast<Eigen::Index>(pair.winner_mask.size()) !=
            pair.winner.frames() ||
        static_cast<Eigen::Index>(pair.loser_mask.size()) !=
            pair.loser.frames())
      throw SchemaError(SchemaError::Code::OutOfRange,
                        "dataset line " + std::to_string(line_no) +
                            ": mask/stream length mismatch");
    ds.pairs.push_back(std::move(pair));
  }
  return ds;
}

PreferenceDataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open dataset file " + path);
  return read_dataset(in);
}

}  // namespace duplex::pairs
