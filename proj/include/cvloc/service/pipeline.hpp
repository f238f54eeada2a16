#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "cvloc/corpus/scene.hpp"
#include "cvloc/encoders/model.hpp"
#include "cvloc/geoindex/index.hpp"
#include "cvloc/training/trainer.hpp"

namespace cvloc::service {

// What the query tower reads: the scene description, or the street-level
// proxy raster (used for the image branch of score fusion).
enum class QueryKind { text, street };

std::string query_kind_name(QueryKind q);
QueryKind parse_query_kind(const std::string& s);

// Everything needed to reproduce a training run, stored beside the checkpoint.
struct TrainSettings {
  encoders::EncoderConfig encoder;  // vocab_size is filled in from the corpus
  training::TrainConfig train;
  geoindex::Modality modality = geoindex::Modality::osm;
  QueryKind query = QueryKind::text;

  // The desk-scale configuration the test suite trains with.
  static TrainSettings toy();
  static TrainSettings from_json(const std::string& text);
  std::string to_json() const;
};

// Model, its vocabulary and the settings it was trained with.
struct ModelBundle {
  encoders::DualEncoder model;
  encoders::Vocabulary vocab;
  TrainSettings settings;

  std::size_t context() const { return model.config.expanded_context; }
  encoders::TokenSequence tokenize(const std::string& text) const;
  encoders::QueryInput query_input(const corpus::SceneRecord& record) const;
  encoders::QueryInput text_query(const std::string& text) const;
};

// <path> checkpoint, <path>.vocab, <path>.json settings.
void save_bundle(const std::filesystem::path& path, const ModelBundle& bundle);
ModelBundle load_bundle(const std::filesystem::path& path);

// Train/test split of a corpus directory, seeded by the corpus seed.
corpus::Split corpus_split(std::span<const corpus::SceneRecord> records, std::uint64_t seed);

// Untrained bundle: vocabulary from the training texts, fresh towers.
ModelBundle init_bundle(std::span<const corpus::SceneRecord> train_records, TrainSettings settings);

std::vector<training::TrainingPair> make_pairs(const ModelBundle& bundle,
                                               std::span<const corpus::SceneRecord> records);

// Builds a bundle and trains it; `log` receives one tab-separated line per epoch.
ModelBundle train_bundle(std::span<const corpus::SceneRecord> train_records, const TrainSettings& settings,
                         std::ostream* log = nullptr);

// Reference embeddings of every record's tile in `modality`.
geoindex::ReferenceIndex build_index(const ModelBundle& bundle, std::span<const corpus::SceneRecord> records,
                                     geoindex::Modality modality);

std::vector<geoindex::EvalQuery> encode_queries(const ModelBundle& bundle,
                                                std::span<const corpus::SceneRecord> records);

// Query set named by `split`: "train", "test" or "all".
std::vector<corpus::SceneRecord> select_split(std::span<const corpus::SceneRecord> records, std::uint64_t seed,
                                              const std::string& split);

}  // namespace cvloc::service
