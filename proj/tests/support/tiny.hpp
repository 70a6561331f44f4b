#pragma once

// Small corpora and cheap extractor settings that keep end-to-end tests fast.

#include "malfuse/corpus.hpp"
#include "malfuse/evaluate.hpp"

namespace malfuse::testing {

inline CorpusSpec tiny_corpus_spec(std::size_t families = 4, std::size_t per_family = 10, std::uint64_t seed = 7) {
  CorpusSpec s;
  s.family_count = families;
  s.samples_per_family = per_family;
  s.import_vocab = 80;
  s.api_vocab = 80;
  s.trace_length_min = 30;
  s.trace_length_max = 50;
  s.callgraph_nodes_min = 8;
  s.callgraph_nodes_max = 16;
  s.canonical_size = 16;
  s.seed = seed;
  return s;
}

inline ExtractionConfig tiny_extraction() {
  ExtractionConfig c;
  c.import_vocab = 40;
  c.api_vocab = 40;
  c.lowfreq_length = 40;
  c.cafc.embed_dim = 8;
  c.cafc.kernels = 2;
  c.cafc.hp.epochs = 2;
  c.pv.dim = 8;
  c.pv.epochs = 2;
  c.pv.infer_epochs = 2;
  c.cooc.pool = 8;
  c.cooc.kernels = 2;
  c.cooc.feature_width = 8;
  c.cooc.hp.epochs = 2;
  c.statements.embed_dim = 4;
  c.statements.hidden = 4;
  c.statements.max_statements = 20;
  c.statements.max_tokens = 4;
  c.statements.token_vocab = 100;
  c.statements.hp.epochs = 2;
  return c;
}

inline PipelineConfig tiny_pipeline(Preset preset = Preset::ef1) {
  PipelineConfig c;
  c.extraction = tiny_extraction();
  c.component.hidden = {16};
  c.component.hp.epochs = 5;
  c.fusion.hp.epochs = 5;
  c.preset = preset;
  c.preset_options.dense_width = 16;
  c.validation_fraction = 0.2;
  return c;
}

}  // namespace malfuse::testing
