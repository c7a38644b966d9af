use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use super::config::{ExperimentConfig, TableKind, SHIPPED_SYNTH_SPEC};
use super::ExperimentError;
use crate::combine::{
    apply_weights, score_components, tune_weights, union_cross_rescore, AuxRescorer, CombinationWeights, LasRescorer,
    Rescorer, Tuned, WeightGrid,
};
use crate::corpus::{load_lexicon, synth_corpus, Corpus, FeatureSequence, Lexicon, Split, SynthSpec};
use crate::decode::{beam_search, beam_search_fused, wfst_beam_search, write_nbest, BeamConfig, NBestList};
use crate::eval::{alignment_dump, edit_distance, nbest_diversity, oracle_errors, per, wer, Cell, DiversityReport, Table};
use crate::lmfst::{build_grammar_fst, build_lexicon_fst, compose, train_ngram, Wfst};
use crate::neural::{aux_train, train_las, train_lstm_lm, AuxDecoderModel, LasModel, LstmLm, LstmLmConfig, TrainReport};
use crate::seed::derive_seed;
use crate::units::{build_grapheme_inventory, fix_pronunciations, train_wordpiece, PhonemeCodec, UnitCodec};

type Result<T> = std::result::Result<T, ExperimentError>;

const SPLITS: [&str; 2] = ["dev", "test"];

pub struct ExperimentData {
    pub spec: Option<SynthSpec>,
    pub lexicon: Lexicon,
    pub train: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

/// Loads or synthesizes the corpora. Relative paths resolve against `base`.
pub fn load_data(cfg: &ExperimentConfig, base: &Path) -> Result<ExperimentData> {
    let d = &cfg.data;
    if let Some(dir) = &d.corpus_dir {
        let dir = base.join(dir);
        let lexicon = load_lexicon(&base.join(d.lexicon.as_deref().unwrap_or_default()))?;
        let load = |name: &str, split| Corpus::load(&dir.join(format!("{name}.txt")), split);
        return Ok(ExperimentData {
            spec: None,
            lexicon,
            train: load("train", Split::Train)?,
            dev: load("dev", Split::Dev)?,
            test: load("test", Split::Test)?,
        });
    }
    let spec = match &d.synth_spec {
        Some(p) => SynthSpec::load(&base.join(p))?,
        None => SynthSpec::from_toml(SHIPPED_SYNTH_SPEC)?,
    };
    Ok(ExperimentData {
        lexicon: spec.lexicon.clone(),
        train: synth_corpus(&spec, d.train, Split::Train)?,
        dev: synth_corpus(&spec, d.dev, Split::Dev)?,
        test: synth_corpus(&spec, d.test, Split::Test)?,
        spec: Some(spec),
    })
}

/// The direction checks of the run; `None` when the table behind a check
/// was not requested.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Checks {
    /// Grapheme and word-piece test WER do not exceed the phonemic WER.
    pub units_not_worse_than_phoneme: Option<bool>,
    /// Phoneme rescoring of the word-piece list lowers dev WER.
    pub phoneme_rescoring_helps: Option<bool>,
    /// Word-piece list oracle is below the phonemic list oracle (test).
    pub wordpiece_oracle_below_phoneme: Option<bool>,
    /// Union oracle errors never exceed either constituent, per utterance.
    pub union_oracle_dominates: Option<bool>,
    /// Base model checkpoint unchanged by auxiliary training.
    pub aux_base_frozen: Option<bool>,
    /// Auxiliary rescoring costs at most 0.5 absolute dev WER.
    pub aux_within_half_point: Option<bool>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Summary {
    pub name: String,
    /// WER (%) per row label and split.
    pub wer: BTreeMap<String, BTreeMap<String, f64>>,
    /// Oracle WER (%) per list label and split.
    pub oracle: BTreeMap<String, BTreeMap<String, f64>>,
    /// Phoneme error rate (%) of the phonemic system.
    pub per: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, BTreeMap<String, f64>>,
    pub training: BTreeMap<String, TrainReport>,
    pub parameters: BTreeMap<String, usize>,
    pub diversity: BTreeMap<String, DiversityReport>,
    pub checks: Checks,
}

pub struct ExperimentOutcome {
    pub summary: Summary,
    pub tables: Vec<Table>,
    /// Every file written, relative to the output directory, sorted.
    pub files: Vec<PathBuf>,
}

struct Out {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Out {
    fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| ExperimentError::io(parent, e))?;
        }
        self.files.push(PathBuf::from(rel));
        Ok(p)
    }

    fn write(&mut self, rel: &str, body: &str) -> Result<()> {
        let p = self.path(rel)?;
        std::fs::write(&p, body).map_err(|e| ExperimentError::io(&p, e))
    }

    fn table(&mut self, t: &Table, stem: &str) -> Result<()> {
        self.write(&format!("tables/{stem}.txt"), &t.to_txt())?;
        self.write(&format!("tables/{stem}.tsv"), &t.to_tsv())
    }
}

/// One list per utterance, for the dev and test splits.
#[derive(Clone)]
struct Lists {
    dev: Vec<NBestList>,
    test: Vec<NBestList>,
}

impl Lists {
    fn split(&self, s: &str) -> &[NBestList] {
        if s == "dev" {
            &self.dev
        } else {
            &self.test
        }
    }

    fn map(&self, f: impl Fn(&NBestList) -> NBestList) -> Lists {
        Lists { dev: self.dev.iter().map(&f).collect(), test: self.test.iter().map(&f).collect() }
    }
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a ExperimentData,
    refs: BTreeMap<&'static str, Vec<Vec<String>>>,
    out: Out,
    summary: Summary,
}

impl Ctx<'_> {
    fn corpus(&self, split: &str) -> &Corpus {
        if split == "dev" {
            &self.data.dev
        } else {
            &self.data.test
        }
    }

    fn features(&self, split: &str) -> Vec<&FeatureSequence> {
        self.corpus(split).utterances().iter().map(|u| &u.features).collect()
    }

    fn seed(&self, component: &str) -> u64 {
        derive_seed(self.cfg.seed, component)
    }

    fn beam(&self, beam: usize, lm_weight: f64, eos_margin: f64) -> BeamConfig {
        BeamConfig { beam, max_len_factor: self.cfg.decode.max_len_factor, max_len: None, lm_weight, eos_margin }
    }

    /// Decodes dev and test with `search` and writes the N-best files.
    fn decode(
        &mut self,
        label: &str,
        search: impl Fn(&FeatureSequence) -> std::result::Result<NBestList, crate::decode::DecodeError>,
    ) -> Result<Lists> {
        let mut lists = Vec::new();
        for split in SPLITS {
            info!("decoding {label} {split}");
            let mut out = Vec::new();
            for u in self.corpus(split).utterances() {
                let mut l = search(&u.features)?;
                l.utt_id = u.id.clone();
                out.push(l);
            }
            self.out.write(&format!("nbest/{label}.{split}.nbest"), &write_nbest(&out))?;
            lists.push(out);
        }
        let test = lists.pop().expect("two splits");
        Ok(Lists { dev: lists.pop().expect("two splits"), test })
    }

    fn one_best(lists: &[NBestList]) -> Vec<Vec<String>> {
        lists.iter().map(|l| l.best().map(|h| h.words.clone()).unwrap_or_default()).collect()
    }

    fn wer_of(&self, lists: &[NBestList], split: &str) -> Result<f64> {
        Ok(wer(&self.refs[split], &Self::one_best(lists))?.percent())
    }

    fn oracle_of(&self, lists: &[NBestList], split: &str) -> Result<f64> {
        let errs: usize = oracle_errors(lists, &self.refs[split])?.iter().sum();
        let n: usize = self.refs[split].iter().map(Vec::len).sum();
        Ok(100.0 * errs as f64 / n as f64)
    }

    /// Row cells for dev and test, recording WERs (and oracles) in the summary.
    fn row(&mut self, label: &str, lists: &Lists, with_oracle: bool) -> Result<Vec<Option<Cell>>> {
        let mut cells = Vec::new();
        for split in SPLITS {
            let w = self.wer_of(lists.split(split), split)?;
            self.summary.wer.entry(label.to_string()).or_default().insert(split.into(), w);
            if with_oracle {
                let o = self.oracle_of(lists.split(split), split)?;
                self.summary.oracle.entry(label.to_string()).or_default().insert(split.into(), o);
                cells.push(Some(Cell::with_oracle(w, o)));
            } else {
                cells.push(Some(Cell::new(w)));
            }
        }
        Ok(cells)
    }

    fn grid(&self, dims: usize) -> Result<WeightGrid> {
        Ok(WeightGrid::cartesian(&self.cfg.combine.values()?, dims))
    }

    /// Tunes weights on dev, then rescores both splits with them.
    fn rescore(&mut self, label: &str, base: &Lists, rescorers: &[&dyn Rescorer]) -> Result<Lists> {
        info!("tuning {label}");
        let nonempty: Vec<usize> = (0..base.dev.len()).filter(|&i| !base.dev[i].is_empty()).collect();
        let feats = self.features("dev");
        let tuned: Tuned = tune_weights(
            &nonempty.iter().map(|&i| base.dev[i].clone()).collect::<Vec<_>>(),
            &nonempty.iter().map(|&i| feats[i]).collect::<Vec<_>>(),
            &nonempty.iter().map(|&i| self.refs["dev"][i].clone()).collect::<Vec<_>>(),
            rescorers,
            &self.grid(rescorers.len())?,
        )?;
        info!("{label}: weights {:?}", tuned.point);
        let names: Vec<&str> = rescorers.iter().map(|r| r.name()).collect();
        let mut lists = Vec::new();
        for split in SPLITS {
            let feats = self.features(split);
            let out: Vec<NBestList> = base
                .split(split)
                .iter()
                .zip(&feats)
                .map(|(l, f)| apply_weights(l, &names, &score_components(l, f, rescorers), &tuned.point))
                .collect();
            lists.push(out);
        }
        self.save_weights(label, &tuned.weights)?;
        let test = lists.pop().expect("two splits");
        Ok(Lists { dev: lists.pop().expect("two splits"), test })
    }

    fn save_weights(&mut self, label: &str, w: &CombinationWeights) -> Result<()> {
        self.out.write(&format!("weights/{label}.txt"), &w.to_text())?;
        self.summary.weights.insert(label.to_string(), w.iter().map(|(k, v)| (k.to_string(), v)).collect());
        Ok(())
    }
}

fn train_system(ctx: &mut Ctx, kind: &str, codec: UnitCodec) -> Result<LasModel> {
    let dim = ctx.data.train.utterances()[0].features.dim();
    let las = ctx.cfg.model.las(dim, codec.inventory().len())?;
    let mut model = LasModel::new(las, codec, ctx.seed(&format!("init-{kind}")))?;
    info!("training {kind} model ({} parameters)", model.params().num_scalars());
    let report = train_las(&mut model, &ctx.data.train, Some(&ctx.data.dev), &ctx.cfg.train.with_seed(ctx.seed(&format!("train-{kind}"))))?;
    model.save(&ctx.out.path(&format!("models/{kind}.ckpt"))?)?;
    ctx.summary.training.insert(kind.to_string(), report);
    ctx.summary.parameters.insert(kind.to_string(), model.params().num_scalars());
    Ok(model)
}

fn train_fusion_lm(ctx: &mut Ctx, kind: &str, codec: &UnitCodec) -> Result<LstmLm> {
    let f = &ctx.cfg.fusion;
    let config = LstmLmConfig { embedding_dim: f.embedding_dim, layers: f.layers, hidden: f.hidden, vocab_size: codec.inventory().len() };
    let mut lm = LstmLm::new(config, codec.clone(), ctx.seed(&format!("init-lm-{kind}")))?;
    let text: Vec<Vec<u32>> = ctx.data.train.transcripts().map(|t| codec.encode(t)).collect();
    let mut cfg = ctx.cfg.train.with_seed(ctx.seed(&format!("train-lm-{kind}")));
    cfg.epochs = f.epochs;
    info!("training {kind} LSTM LM");
    let report = train_lstm_lm(&mut lm, &text, &cfg)?;
    lm.save(&ctx.out.path(&format!("models/lm-{kind}.ckpt"))?)?;
    ctx.summary.training.insert(format!("lm-{kind}"), report);
    Ok(lm)
}

/// The word-level search network: lexicon (restricted to the LM
/// vocabulary) composed with the n-gram grammar.
fn build_network(ctx: &mut Ctx) -> Result<Wfst> {
    let text: Vec<Vec<String>> = ctx.data.train.transcripts().map(<[String]>::to_vec).collect();
    let lm = train_ngram(&text, &ctx.cfg.lm.ngram)?;
    lm.save_arpa(&ctx.out.path("lm/words.arpa")?)?;
    let lex = ctx.data.lexicon.restrict(|w| lm.word_id(w).is_some());
    let lg = compose(&build_lexicon_fst(&lex)?, &build_grammar_fst(&lm))?;
    lg.save(&ctx.out.path("lm/lg.fst")?)?;
    Ok(lg)
}

/// The phonemic system's lists with totals replaced by the LAS score alone,
/// so they sit on the same scale as another model's log-probabilities.
fn las_only(l: &NBestList) -> NBestList {
    let mut l = l.clone();
    for h in &mut l.hyps {
        h.total = h.components.get("las").copied().unwrap_or(h.total);
    }
    l
}

/// Union weight minimizing dev errors; ties go to the smallest weight.
fn tune_union(ctx: &Ctx, a: &[NBestList], b: &[NBestList], ra: &dyn Rescorer, rb: &dyn Rescorer) -> Result<f64> {
    let feats = ctx.features("dev");
    let refs = &ctx.refs["dev"];
    // (words, score A, score B) of every hypothesis, A's list first
    let pools: Vec<Vec<(&Vec<String>, f64, f64)>> = (0..a.len())
        .map(|u| {
            let xb = score_components(&a[u], feats[u], &[rb]);
            let xa = score_components(&b[u], feats[u], &[ra]);
            a[u].hyps
                .iter()
                .zip(xb)
                .map(|(h, s)| (&h.words, h.total, s[0]))
                .chain(b[u].hyps.iter().zip(xa).map(|(h, s)| (&h.words, s[0], h.total)))
                .collect()
        })
        .collect();
    let mut cache: Vec<HashMap<usize, usize>> = vec![HashMap::new(); a.len()];
    let mut best: Option<(usize, f64)> = None;
    for lambda in ctx.cfg.combine.values()? {
        let mut errors = 0;
        for (u, pool) in pools.iter().enumerate() {
            let pick = pool
                .iter()
                .enumerate()
                .map(|(i, (_, sa, sb))| (i, if lambda == 0.0 { *sa } else { sa + lambda * sb }))
                .fold(None::<(usize, f64)>, |acc, (i, t)| match acc {
                    Some((_, bt)) if bt >= t => acc,
                    _ => Some((i, t)),
                });
            errors += match pick {
                Some((i, _)) => *cache[u].entry(i).or_insert_with(|| edit_distance(&refs[u], pool[i].0)),
                None => refs[u].len(),
            };
        }
        if best.is_none_or(|(e, _)| errors < e) {
            best = Some((errors, lambda));
        }
    }
    Ok(best.expect("grid is not empty").1)
}

fn union_lists(ctx: &Ctx, a: &Lists, b: &Lists, ra: &dyn Rescorer, rb: &dyn Rescorer, lambda: f64) -> Result<Lists> {
    let mut lists = Vec::new();
    for split in SPLITS {
        let feats = ctx.features(split);
        let out = a
            .split(split)
            .iter()
            .zip(b.split(split))
            .zip(&feats)
            .map(|((x, y), f)| union_cross_rescore(x, y, f, ra, rb, lambda))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        lists.push(out);
    }
    let test = lists.pop().expect("two splits");
    Ok(Lists { dev: lists.pop().expect("two splits"), test })
}

fn dump_alignments(ctx: &mut Ctx, label: &str, lists: &Lists) -> Result<()> {
    let ids: Vec<String> = lists.test.iter().map(|l| l.utt_id.clone()).collect();
    let body = alignment_dump(&ids, &ctx.refs["test"], &Ctx::one_best(&lists.test));
    ctx.out.write(&format!("alignments/{label}.test.txt"), &body)
}

/// Runs the configured tables end to end and writes every artifact under
/// `out_dir`. Deterministic in the configuration.
pub fn run_experiment(cfg: &ExperimentConfig, base: &Path, out_dir: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let data = load_data(cfg, base)?;
    let wants = |t: TableKind| cfg.tables.contains(&t);
    let refs = BTreeMap::from([
        ("dev", data.dev.transcripts().map(<[String]>::to_vec).collect()),
        ("test", data.test.transcripts().map(<[String]>::to_vec).collect()),
    ]);
    let mut ctx = Ctx {
        cfg,
        data: &data,
        refs,
        out: Out { dir: out_dir.to_path_buf(), files: Vec::new() },
        summary: Summary { name: cfg.name.clone(), ..Summary::default() },
    };
    ctx.out.write("config.toml", &cfg.to_toml())?;
    if let Some(spec) = &data.spec {
        ctx.out.write("data/synth.toml", &spec.to_toml())?;
    }

    // units
    let grapheme = UnitCodec::Grapheme(build_grapheme_inventory(&data.train)?);
    let wordpiece = UnitCodec::Wordpiece(train_wordpiece(&data.train, cfg.units.wordpiece_vocab)?);
    let choice = fix_pronunciations(&data.lexicon, ctx.seed("pronunciations"));
    let phoneme_codec = PhonemeCodec::new(data.lexicon.clone(), choice.clone());
    let phoneme = UnitCodec::Phoneme(phoneme_codec.clone());
    ctx.out.write("units/grapheme.txt", &grapheme.inventory().to_text())?;
    if let UnitCodec::Wordpiece(m) = &wordpiece {
        ctx.out.write("units/wordpiece.txt", &m.to_text())?;
    }
    ctx.out.write("units/phoneme.txt", &phoneme.inventory().to_text())?;
    ctx.out.write("units/pronunciations.json", &(serde_json::to_string_pretty(&choice).expect("serializes") + "\n"))?;

    let need_grapheme = wants(TableKind::Units) || wants(TableKind::Table5);
    let need_phoneme = wants(TableKind::Units) || wants(TableKind::Table5) || wants(TableKind::Table6) || wants(TableKind::Table7);
    let network = if need_phoneme { Some(build_network(&mut ctx)?) } else { None };

    let wp_model = train_system(&mut ctx, "wordpiece", wordpiece.clone())?;
    let g_model = if need_grapheme { Some(train_system(&mut ctx, "grapheme", grapheme.clone())?) } else { None };
    let p_model = if need_phoneme { Some(train_system(&mut ctx, "phoneme", phoneme)?) } else { None };

    let n = cfg.decode.beam;
    let plain = ctx.beam(n, 0.0, f64::INFINITY);
    let wp8 = ctx.decode(&format!("wordpiece.{n}"), |f| beam_search(&wp_model, f, &plain))?;
    let mut tables = Vec::new();

    let ph8 = match (&p_model, &network) {
        (Some(m), Some(net)) => {
            let c = ctx.beam(n, cfg.lm.weight, f64::INFINITY);
            Some(ctx.decode(&format!("phoneme.{n}"), |f| wfst_beam_search(m, net, f, &c))?)
        }
        _ => None,
    };

    if wants(TableKind::Units) {
        let g = g_model.as_ref().expect("grapheme model");
        let g8 = ctx.decode(&format!("grapheme.{n}"), |f| beam_search(g, f, &plain))?;
        let ph8 = ph8.as_ref().expect("phoneme lists");
        let mut t = Table::new("WER (%) by output unit", &SPLITS);
        let cells = ctx.row("Grapheme", &g8, false)?;
        t.push("Grapheme", cells);
        let cells = ctx.row("Word-Piece", &wp8, false)?;
        t.push("Word-Piece", cells);
        if cfg.fusion.enabled {
            let fused = ctx.beam(n, cfg.fusion.weight, cfg.fusion.eos_margin);
            for (kind, label, model, codec) in
                [("grapheme", "Grapheme + LSTM LM", g, &grapheme), ("wordpiece", "Word-Piece + LSTM LM", &wp_model, &wordpiece)]
            {
                let lm = train_fusion_lm(&mut ctx, kind, codec)?;
                let lists = ctx.decode(&format!("{kind}-fused.{n}"), |f| beam_search_fused(model, &lm, f, &fused))?;
                let cells = ctx.row(label, &lists, false)?;
                t.push(label, cells);
            }
        }
        let cells = ctx.row("Phoneme", ph8, false)?;
        t.push("Phoneme", cells);
        dump_alignments(&mut ctx, "grapheme", &g8)?;
        dump_alignments(&mut ctx, "wordpiece", &wp8)?;
        dump_alignments(&mut ctx, "phoneme", ph8)?;

        let mut p = Table::new("PER (%) of the phonemic system", &SPLITS);
        let inv = p_model.as_ref().expect("phoneme model").codec().inventory().clone();
        let mut cells = Vec::new();
        for split in SPLITS {
            let sym = |units: &[u32]| units.iter().map(|&u| inv.symbol(u).unwrap_or("<unk>").to_string()).collect::<Vec<_>>();
            let hyp: Vec<Vec<String>> = ph8.split(split).iter().map(|l| l.best().map(|h| sym(&h.units)).unwrap_or_default()).collect();
            let r: Vec<Vec<String>> = ctx.refs[split].iter().map(|w| sym(&phoneme_codec.encode(w))).collect();
            let rate = per(&r, &hyp)?.percent();
            ctx.summary.per.insert(split.to_string(), rate);
            cells.push(Some(Cell::new(rate)));
        }
        p.push("Phoneme", cells);
        let g = ctx.summary.wer["Grapheme"]["test"];
        let w = ctx.summary.wer["Word-Piece"]["test"];
        let ph = ctx.summary.wer["Phoneme"]["test"];
        ctx.summary.checks.units_not_worse_than_phoneme = Some(g <= ph && w <= ph);
        ctx.out.table(&t, "units")?;
        ctx.out.table(&p, "per")?;
        tables.push(t);
        tables.push(p);
    }

    let wp_rescorer = LasRescorer::new("wordpiece", &wp_model);
    let ph_rescorer = p_model.as_ref().map(|m| LasRescorer::new("phoneme", m));
    let mut wp8_phoneme = None;

    if wants(TableKind::Table5) {
        let pr = ph_rescorer.as_ref().expect("phoneme model");
        let gr = LasRescorer::new("grapheme", g_model.as_ref().expect("grapheme model"));
        let mut t = Table::new(&format!("WER (%) of {n}-best rescoring, oracle in parentheses"), &SPLITS);
        let cells = ctx.row("Word-Piece", &wp8, true)?;
        t.push("Word-Piece", cells);
        let with_p = ctx.rescore("table5-phoneme", &wp8, &[pr])?;
        let cells = ctx.row("+ Phoneme", &with_p, false)?;
        t.push("+ Phoneme", cells);
        let with_g = ctx.rescore("table5-grapheme", &wp8, &[&gr])?;
        let cells = ctx.row("+ Grapheme", &with_g, false)?;
        t.push("+ Grapheme", cells);
        let both = ctx.rescore("table5-both", &wp8, &[&gr, pr])?;
        let cells = ctx.row("+ Both", &both, false)?;
        t.push("+ Both", cells);

        let pb = cfg.decode.phoneme_beam;
        let ph_list = if pb == n {
            ph8.clone().expect("phoneme lists")
        } else {
            let (m, net) = (p_model.as_ref().expect("phoneme model"), network.as_ref().expect("network"));
            let c = ctx.beam(pb, cfg.lm.weight, f64::INFINITY);
            ctx.decode(&format!("phoneme.{pb}"), |f| wfst_beam_search(m, net, f, &c))?
        };
        let cells = ctx.row("Phoneme", &ph_list, true)?;
        t.push("Phoneme", cells);
        let rescored = ctx.rescore("table5-phoneme-wordpiece", &ph_list, &[&wp_rescorer])?;
        let cells = ctx.row("Phoneme + Word-Piece", &rescored, false)?;
        t.push("Phoneme + Word-Piece", cells);

        let base = ctx.summary.wer["Word-Piece"]["dev"];
        ctx.summary.checks.phoneme_rescoring_helps = Some(ctx.summary.wer["+ Phoneme"]["dev"] < base);
        let ph8 = ph8.as_ref().expect("phoneme lists");
        let wo = ctx.oracle_of(&wp8.test, "test")?;
        let po = ctx.oracle_of(&ph8.test, "test")?;
        ctx.summary.checks.wordpiece_oracle_below_phoneme = Some(wo < po);
        for (label, lists) in [("wordpiece", &wp8), ("phoneme", ph8)] {
            ctx.summary.diversity.insert(label.to_string(), nbest_diversity(&lists.test));
        }
        let mut d = Table::new(&format!("Diversity of the test {n}-best lists"), &["distinct", "pairwise", "set size"]);
        for (label, key) in [("Word-Piece", "wordpiece"), ("Phoneme", "phoneme")] {
            let r = &ctx.summary.diversity[key];
            d.push(label, vec![Some(Cell::new(r.mean_distinct)), Some(Cell::new(r.mean_pairwise)), Some(Cell::new(r.mean_set_size))]);
        }
        ctx.out.write("diversity.json", &(serde_json::to_string_pretty(&ctx.summary.diversity).expect("serializes") + "\n"))?;
        ctx.out.table(&t, "table5")?;
        ctx.out.table(&d, "diversity")?;
        wp8_phoneme = Some(with_p);
        tables.push(t);
        tables.push(d);
    }

    if wants(TableKind::Table6) {
        let pr = ph_rescorer.as_ref().expect("phoneme model");
        let ph8 = ph8.as_ref().expect("phoneme lists");
        let big = cfg.decode.beam_large;
        let mut t = Table::new("WER (%) of the union with cross-rescoring, oracle in parentheses", &SPLITS);
        let label8 = format!("Word-Piece {n}");
        let cells = ctx.row(&label8, &wp8, true)?;
        t.push(&label8, cells);
        let with_p = match wp8_phoneme.take() {
            Some(l) => l,
            None => ctx.rescore("table5-phoneme", &wp8, &[pr])?,
        };
        let label = format!("Word-Piece {n} + Phoneme");
        let cells = ctx.row(&label, &with_p, false)?;
        t.push(&label, cells);

        let ph_las = ph8.map(las_only);
        let lambda = tune_union(&ctx, &wp8.dev, &ph_las.dev, &wp_rescorer, pr)?;
        let mut w = CombinationWeights::new();
        w.set("phoneme", lambda)?;
        ctx.save_weights("table6-union", &w)?;
        let union = union_lists(&ctx, &wp8, &ph_las, &wp_rescorer, pr, lambda)?;
        for split in SPLITS {
            ctx.out.write(&format!("nbest/union.{}.{split}.nbest", 2 * n), &write_nbest(union.split(split)))?;
        }
        let label = format!("Union {}", 2 * n);
        let cells = ctx.row(&label, &union, true)?;
        t.push(&label, cells);
        let mut dominated = true;
        for split in SPLITS {
            let r = &ctx.refs[split];
            let u = oracle_errors(union.split(split), r)?;
            let a = oracle_errors(wp8.split(split), r)?;
            let b = oracle_errors(ph8.split(split), r)?;
            dominated &= (0..u.len()).all(|i| u[i] <= a[i].min(b[i]));
        }
        ctx.summary.checks.union_oracle_dominates = Some(dominated);

        let wide = ctx.beam(big, 0.0, f64::INFINITY);
        let wp16 = ctx.decode(&format!("wordpiece.{big}"), |f| beam_search(&wp_model, f, &wide))?;
        let label = format!("Word-Piece {big}");
        let cells = ctx.row(&label, &wp16, true)?;
        t.push(&label, cells);
        let with_p16 = ctx.rescore("table6-phoneme", &wp16, &[pr])?;
        let label = format!("Word-Piece {big} + Phoneme");
        let cells = ctx.row(&label, &with_p16, false)?;
        t.push(&label, cells);
        ctx.out.table(&t, "table6")?;
        tables.push(t);
    }

    if wants(TableKind::Table7) {
        let mut aux_cfg = cfg.train.with_seed(ctx.seed("train-aux"));
        aux_cfg.epochs = cfg.aux.epochs;
        let before = std::fs::read(ctx.out.dir.join("models/wordpiece.ckpt")).map_err(|e| ExperimentError::io(&ctx.out.dir, e))?;
        info!("training auxiliary phoneme decoder");
        let (aux, report): (AuxDecoderModel, _) = aux_train(&wp_model, &data.train, phoneme_codec.clone(), cfg.aux.config(), &aux_cfg)?;
        aux.save(&ctx.out.path("models/aux.ckpt")?)?;
        let base_path = ctx.out.path("models/aux-base.ckpt")?;
        aux.base().save(&base_path)?;
        let after = std::fs::read(&base_path).map_err(|e| ExperimentError::io(&base_path, e))?;
        ctx.summary.checks.aux_base_frozen = Some(before == after);
        ctx.summary.training.insert("aux".into(), report);
        let aux_params = aux.params().num_scalars();
        ctx.summary.parameters.insert("aux".into(), aux_params);

        let wp_params = wp_model.params().num_scalars();
        let mut t = Table::new("WER (%) with an auxiliary phoneme decoder", &["dev", "test", "params (K)"]);
        let k = |p: usize| Some(Cell::new(p as f64 / 1000.0));
        let mut cells = ctx.row("Word-Piece (WP)", &wp8, false)?;
        cells.push(k(wp_params));
        t.push("Word-Piece (WP)", cells);
        let ar = AuxRescorer::new("aux", &aux);
        let with_aux = ctx.rescore("table7-aux", &wp8, &[&ar])?;
        let mut cells = ctx.row("WP + Auxiliary phoneme", &with_aux, false)?;
        cells.push(k(wp_params + aux_params));
        t.push("WP + Auxiliary phoneme", cells);
        let pr = ph_rescorer.as_ref().expect("phoneme model");
        let with_p = ctx.rescore("table7-phoneme", &wp8, &[pr])?;
        let mut cells = ctx.row("WP + Phoneme", &with_p, false)?;
        cells.push(k(wp_params + p_model.as_ref().expect("phoneme model").params().num_scalars()));
        t.push("WP + Phoneme", cells);
        let d = ctx.summary.wer["WP + Auxiliary phoneme"]["dev"] - ctx.summary.wer["Word-Piece (WP)"]["dev"];
        ctx.summary.checks.aux_within_half_point = Some(d <= 0.5);
        ctx.out.table(&t, "table7")?;
        tables.push(t);
    }

    ctx.out.write("tables.json", &(serde_json::to_string_pretty(&tables).expect("serializes") + "\n"))?;
    let summary = serde_json::to_string_pretty(&ctx.summary).expect("serializes") + "\n";
    ctx.out.write("summary.json", &summary)?;
    let mut files = ctx.out.files;
    files.sort();
    files.dedup();
    Ok(ExperimentOutcome { summary: ctx.summary, tables, files })
}
