use std::sync::OnceLock;

use mamr::subword::{train_bpe, BpeModel, Piece, TrainOptions};
use proptest::prelude::*;

const CORPUS: [&str; 8] = [
    "the boy wants the girl to go",
    "der Junge will, dass das Mädchen geht",
    "( want-01 :ARG0 ( boy ) :ARG1 ( go-01 :ARG0 boy ) )",
    "les garçons veulent que la fille parte",
    "момче иска момичето да отиде",
    "the girls went to the city of New York in 2020",
    "thethethe boyboy wantswants",
    "ääää ßß 中文 中文",
];

fn model() -> &'static BpeModel {
    static MODEL: OnceLock<BpeModel> = OnceLock::new();
    MODEL.get_or_init(|| train_bpe(&CORPUS, TrainOptions { num_merges: 60, protect_roles: true }).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn decode_inverts_encode(line in "[^\n\r]{0,60}") {
        let bpe = model();
        prop_assert_eq!(bpe.decode(&bpe.encode(&line)).unwrap(), line);
    }

    /// Id sequences produced by the encoder (which contain no specials for
    /// this alphabet) survive a decode/encode cycle unchanged.
    #[test]
    fn encode_inverts_decode_on_encoder_output(line in "[a-z äß中文(),:-]{0,40}") {
        let bpe = model();
        let ids = bpe.encode(&line);
        prop_assert!(ids.iter().all(|&id| matches!(bpe.piece(id), Some(Piece::Text(_)) | Some(Piece::Byte(_)))));
        prop_assert_eq!(bpe.encode(&bpe.decode(&ids).unwrap()), ids);
    }

    #[test]
    fn training_is_deterministic(lines in prop::collection::vec("[a-e ]{1,12}", 1..12), merges in 0usize..30) {
        let opts = TrainOptions { num_merges: merges, protect_roles: false };
        let a = train_bpe(&lines, opts).unwrap();
        let b = train_bpe(&lines, opts).unwrap();
        prop_assert_eq!(a.merges(), b.merges());
        prop_assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn more_merges_never_lengthen_training_lines(
        lines in prop::collection::vec("[a-d ]{1,16}", 1..10),
        fewer in 0usize..15,
        extra in 1usize..15,
    ) {
        let small = train_bpe(&lines, TrainOptions { num_merges: fewer, protect_roles: false }).unwrap();
        let large = train_bpe(&lines, TrainOptions { num_merges: fewer + extra, protect_roles: false }).unwrap();
        for line in &lines {
            prop_assert!(large.encode(line).len() <= small.encode(line).len(), "{:?}", line);
        }
    }
}
