//! Shared inputs for the benchmarks: a generated relation corpus with its
//! toy encoder and casebase.

use casereader::synthetic::{toy_relation_corpus, ToyCorpus, ToyCorpusConfig};
use casereader::{Casebase, RuleRecognizer, ToyEncoderParams};

pub struct Fixture {
    pub corpus: ToyCorpus,
    pub recognizer: RuleRecognizer,
    pub params: ToyEncoderParams,
    pub casebase: Casebase,
}

impl Fixture {
    pub fn new(seed: u64) -> Self {
        let corpus = toy_relation_corpus(&ToyCorpusConfig::default())
            .expect("default corpus config is valid");
        let recognizer = corpus.recognizer();
        let params = ToyEncoderParams::with_defaults(seed);
        let casebase =
            Casebase::build(&corpus.train, &params, &recognizer).expect("toy casebase builds");
        Fixture {
            corpus,
            recognizer,
            params,
            casebase,
        }
    }
}
