//! NLI pair grouping, file formats, and a synthetic parallel corpus.

mod pairs;
mod synthetic;
mod tsv;


pub use pairs::{
    load_nli_table, load_pairs_tsv, pairs_to_triplets, parse_nli_table, parse_pairs_tsv, Label, NliTable, PairRecord, TripletBuild,
};
pub use synthetic::{gen_synthetic_parallel, multiset_jaccard, CorpusSpec, MiningTask, SyntheticCorpus};
pub use tsv::{
    align_parallel, format_triplets_tsv, load_parallel_tsv, load_sts_tsv, load_triplets_tsv, parse_parallel_tsv, parse_sts_tsv,
    parse_triplets_tsv, write_parallel_tsv, write_sts_tsv, write_triplets_tsv, ParallelRow, StsPair,
};
