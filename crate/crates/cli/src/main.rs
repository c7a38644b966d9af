use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use unitlab::combine::{
    apply_weights, score_components, tune_weights, union_cross_rescore, AuxRescorer, CombinationWeights, LasRescorer,
    NGramRescorer, Rescorer, WeightGrid,
};
use unitlab::corpus::{load_lexicon, synth_corpus, Corpus, FeatureSequence, Split, SynthSpec};
use unitlab::decode::{beam_search, beam_search_fused, read_nbest, wfst_beam_search, write_nbest, BeamConfig, NBestList};
use unitlab::eval::{alignment_dump, oracle_wer, per, wer, Table};
use unitlab::experiment::{run_experiment, ExperimentConfig, SHIPPED_SYNTH_SPEC};
use unitlab::lmfst::{build_grammar_fst, build_lexicon_fst, compose, train_ngram, NGramLm, Wfst};
use unitlab::neural::{aux_train, train_las, train_lstm_lm, AuxDecoderModel, LasModel, LstmLm, LstmLmConfig};
use unitlab::seed::derive_seed;
use unitlab::units::{build_grapheme_inventory, fix_pronunciations, train_wordpiece, PhonemeCodec, UnitCodec};

#[derive(Parser)]
#[command(name = "unitlab", version, about = "Output-unit experiments for attention encoder-decoder ASR")]
struct Cli {
    /// Experiment configuration (TOML); defaults to the `synthetic` preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Grapheme,
    Wordpiece,
    Phoneme,
}

#[derive(Clone, Copy, ValueEnum)]
enum LmKind {
    Ngram,
    Lstm,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/dev/test corpora and the lexicon from a SynthSpec.
    Synth {
        /// SynthSpec file; the shipped spec when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Build a unit inventory and write it as units.json.
    TrainUnits {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        train: PathBuf,
        /// Required for phonemes.
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// Word-piece vocabulary size (overrides the config).
        #[arg(long)]
        vocab: Option<usize>,
    },
    /// Train a word n-gram (with --lexicon also the L∘G network) or a unit LSTM LM.
    TrainLm {
        #[arg(long, value_enum, default_value = "ngram")]
        kind: LmKind,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        lexicon: Option<PathBuf>,
        /// units.json, required for the LSTM LM.
        #[arg(long)]
        units: Option<PathBuf>,
    },
    /// Train an attention encoder-decoder on a unit inventory.
    TrainModel {
        #[arg(long)]
        units: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train an auxiliary phoneme decoder on a frozen model.
    TrainAux {
        #[arg(long)]
        model: PathBuf,
        /// Phoneme units.json.
        #[arg(long)]
        units: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Beam search, optionally fused with an LSTM LM or through an L∘G network.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// LSTM LM checkpoint for shallow fusion.
        #[arg(long, conflicts_with = "network")]
        lm: Option<PathBuf>,
        /// L∘G network for phoneme models.
        #[arg(long)]
        network: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        /// Fusion or network LM weight (overrides the config).
        #[arg(long)]
        lm_weight: Option<f64>,
        /// End-of-sentence margin for fused search; `inf` disables it.
        #[arg(long)]
        eos_margin: Option<f64>,
    },
    /// Rescore N-best lists with a weighted sum of model scores.
    Rescore {
        #[arg(long)]
        nbest: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// `name=las:PATH`, `name=aux:PATH` or `name=ngram:PATH`; repeatable.
        #[arg(long = "rescorer", required = true)]
        rescorers: Vec<String>,
        /// Weights file; without it weights are tuned on the corpus references.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Union of two systems' lists with cross-rescoring.
    Union {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        model_a: PathBuf,
        #[arg(long)]
        model_b: PathBuf,
        #[arg(long)]
        lambda: f64,
        /// Rank list B by its `las` component instead of its total.
        #[arg(long)]
        las_only_b: bool,
    },
    /// WER and oracle WER of N-best lists against the corpus references.
    Evaluate {
        #[arg(long)]
        nbest: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Phoneme units.json; adds the PER of the 1-best mapped to phonemes.
        #[arg(long)]
        phonemes: Option<PathBuf>,
    },
    /// Re-render the tables of a finished run.
    Report {
        /// Output directory of `run-experiment`.
        #[arg(long)]
        run: PathBuf,
    },
    /// Run a preset (or the --config file) end to end.
    RunExperiment {
        /// Preset name; ignored when --config is given.
        preset: Option<String>,
    },
}

fn load_config(cli: &Cli, preset: Option<&str>) -> Result<(ExperimentConfig, PathBuf)> {
    let (mut cfg, base) = match &cli.config {
        Some(p) => {
            need(p)?;
            let cfg = ExperimentConfig::load(p)?;
            (cfg, p.parent().map(PathBuf::from).unwrap_or_default())
        }
        None => {
            let name = preset.unwrap_or("synthetic");
            let cfg = ExperimentConfig::preset(name).with_context(|| {
                format!("unknown preset `{name}` (known: {})", ExperimentConfig::preset_names().join(", "))
            })?;
            (cfg, PathBuf::from("."))
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok((cfg, base))
}

fn need(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        bail!("missing artifact: {}", path.display())
    }
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(dir)
}

fn write(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).with_context(|| format!("cannot write {}", path.display()))
}

fn corpus(path: &Path, split: Split) -> Result<Corpus> {
    need(path)?;
    Ok(Corpus::load(path, split)?)
}

fn units(path: &Path) -> Result<UnitCodec> {
    need(path)?;
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("bad unit file {}", path.display()))
}

fn las(path: &Path) -> Result<LasModel> {
    need(path)?;
    Ok(LasModel::load(path)?)
}

fn nbest(path: &Path) -> Result<Vec<NBestList>> {
    need(path)?;
    Ok(read_nbest(path)?)
}

/// Refuses lists whose utterance ids do not line up with the corpus.
fn matched<'a>(lists: &[NBestList], corpus: &'a Corpus) -> Result<Vec<&'a FeatureSequence>> {
    let utts = corpus.utterances();
    if lists.len() != utts.len() {
        bail!("{} lists for {} utterances", lists.len(), utts.len());
    }
    for (l, u) in lists.iter().zip(utts) {
        if l.utt_id != u.id {
            bail!("list `{}` does not match utterance `{}`", l.utt_id, u.id);
        }
    }
    Ok(utts.iter().map(|u| &u.features).collect())
}

fn refs(corpus: &Corpus) -> Vec<Vec<String>> {
    corpus.transcripts().map(<[String]>::to_vec).collect()
}

enum Loaded {
    Las(LasModel),
    Aux(AuxDecoderModel),
    NGram(NGramLm),
}

fn parse_rescorer(arg: &str) -> Result<(String, Loaded)> {
    let (name, rest) = arg.split_once('=').ok_or_else(|| anyhow!("rescorer `{arg}` is not name=kind:path"))?;
    let (kind, path) = rest.split_once(':').ok_or_else(|| anyhow!("rescorer `{arg}` is not name=kind:path"))?;
    let path = Path::new(path);
    need(path)?;
    let model = match kind {
        "las" => Loaded::Las(LasModel::load(path)?),
        "aux" => Loaded::Aux(AuxDecoderModel::load(path)?),
        "ngram" => Loaded::NGram(NGramLm::load_arpa(path)?),
        other => bail!("unknown rescorer kind `{other}` (las, aux, ngram)"),
    };
    Ok((name.to_string(), model))
}

fn rescorer<'a>(name: &str, m: &'a Loaded) -> Box<dyn Rescorer + 'a> {
    match m {
        Loaded::Las(m) => Box::new(LasRescorer::new(name, m)),
        Loaded::Aux(m) => Box::new(AuxRescorer::new(name, m)),
        Loaded::NGram(m) => Box::new(NGramRescorer::new(name, m)),
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { spec } => {
            let (cfg, _) = load_config(cli, None)?;
            let spec = match spec {
                Some(p) => {
                    need(p)?;
                    SynthSpec::load(p)?
                }
                None => SynthSpec::from_toml(SHIPPED_SYNTH_SPEC)?,
            };
            let dir = out_dir(cli)?;
            for (split, n) in [(Split::Train, cfg.data.train), (Split::Dev, cfg.data.dev), (Split::Test, cfg.data.test)] {
                synth_corpus(&spec, n, split)?.save(&dir.join(format!("{}.txt", split.name())))?;
            }
            write(&dir.join("lexicon.txt"), &spec.lexicon.to_text())?;
            write(&dir.join("synth.toml"), &spec.to_toml())?;
        }
        Command::TrainUnits { kind, train, lexicon, vocab } => {
            let (cfg, _) = load_config(cli, None)?;
            let train = corpus(train, Split::Train)?;
            let codec = match kind {
                Kind::Grapheme => UnitCodec::Grapheme(build_grapheme_inventory(&train)?),
                Kind::Wordpiece => {
                    UnitCodec::Wordpiece(train_wordpiece(&train, vocab.unwrap_or(cfg.units.wordpiece_vocab))?)
                }
                Kind::Phoneme => {
                    let path = lexicon.as_deref().ok_or_else(|| anyhow!("phoneme units need --lexicon"))?;
                    need(path)?;
                    let lex = load_lexicon(path)?;
                    let choice = fix_pronunciations(&lex, derive_seed(cfg.seed, "pronunciations"));
                    UnitCodec::Phoneme(PhonemeCodec::new(lex, choice))
                }
            };
            let dir = out_dir(cli)?;
            write(&dir.join("units.json"), &(serde_json::to_string_pretty(&codec)? + "\n"))?;
        }
        Command::TrainLm { kind, train, lexicon, units: unit_path } => {
            let (cfg, _) = load_config(cli, None)?;
            let train = corpus(train, Split::Train)?;
            let dir = out_dir(cli)?;
            match kind {
                LmKind::Ngram => {
                    let lm = train_ngram(&refs(&train), &cfg.lm.ngram)?;
                    lm.save_arpa(&dir.join("words.arpa"))?;
                    if let Some(path) = lexicon {
                        need(path)?;
                        let lex = load_lexicon(path)?.restrict(|w| lm.word_id(w).is_some());
                        compose(&build_lexicon_fst(&lex)?, &build_grammar_fst(&lm))?.save(&dir.join("lg.fst"))?;
                    }
                }
                LmKind::Lstm => {
                    let path = unit_path.as_deref().ok_or_else(|| anyhow!("the LSTM LM needs --units"))?;
                    let codec = units(path)?;
                    let kind = codec.kind().name();
                    let f = &cfg.fusion;
                    let config = LstmLmConfig {
                        embedding_dim: f.embedding_dim,
                        layers: f.layers,
                        hidden: f.hidden,
                        vocab_size: codec.inventory().len(),
                    };
                    let text: Vec<Vec<u32>> = train.transcripts().map(|t| codec.encode(t)).collect();
                    let mut lm = LstmLm::new(config, codec, derive_seed(cfg.seed, &format!("init-lm-{kind}")))?;
                    let mut tc = cfg.train.with_seed(derive_seed(cfg.seed, &format!("train-lm-{kind}")));
                    tc.epochs = f.epochs;
                    let report = train_lstm_lm(&mut lm, &text, &tc)?;
                    lm.save(&dir.join("lm.ckpt"))?;
                    write(&dir.join("lm-report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
                }
            }
        }
        Command::TrainModel { units: unit_path, train, dev, epochs } => {
            let (cfg, _) = load_config(cli, None)?;
            let codec = units(unit_path)?;
            let train = corpus(train, Split::Train)?;
            let dev = dev.as_deref().map(|p| corpus(p, Split::Dev)).transpose()?;
            let dim = train.utterances()[0].features.dim();
            let kind = codec.kind().name();
            let config = cfg.model.las(dim, codec.inventory().len())?;
            let mut model = LasModel::new(config, codec, derive_seed(cfg.seed, &format!("init-{kind}")))?;
            let mut tc = cfg.train.with_seed(derive_seed(cfg.seed, &format!("train-{kind}")));
            if let Some(e) = epochs {
                tc.epochs = *e;
            }
            let report = train_las(&mut model, &train, dev.as_ref(), &tc)?;
            let dir = out_dir(cli)?;
            model.save(&dir.join("model.ckpt"))?;
            write(&dir.join("train-report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
        }
        Command::TrainAux { model, units: unit_path, train, epochs } => {
            let (cfg, _) = load_config(cli, None)?;
            let base = las(model)?;
            let UnitCodec::Phoneme(codec) = units(unit_path)? else {
                bail!("{} does not hold phoneme units", unit_path.display());
            };
            let train = corpus(train, Split::Train)?;
            let mut tc = cfg.train.with_seed(derive_seed(cfg.seed, "train-aux"));
            tc.epochs = epochs.unwrap_or(cfg.aux.epochs);
            let (aux, report) = aux_train(&base, &train, codec, cfg.aux.config(), &tc)?;
            let dir = out_dir(cli)?;
            aux.save(&dir.join("aux.ckpt"))?;
            write(&dir.join("aux-report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
        }
        Command::Decode { model, corpus: corpus_path, lm, network, beam, lm_weight, eos_margin } => {
            let (cfg, _) = load_config(cli, None)?;
            let model = las(model)?;
            let data = corpus(corpus_path, Split::Test)?;
            let mut bc = BeamConfig {
                beam: beam.unwrap_or(cfg.decode.beam),
                max_len_factor: cfg.decode.max_len_factor,
                max_len: None,
                lm_weight: 0.0,
                eos_margin: f64::INFINITY,
            };
            let fused = lm
                .as_deref()
                .map(|p| -> Result<LstmLm> {
                    need(p)?;
                    Ok(LstmLm::load(p)?)
                })
                .transpose()?;
            let net = network
                .as_deref()
                .map(|p| -> Result<Wfst> {
                    need(p)?;
                    Ok(Wfst::load(p)?)
                })
                .transpose()?;
            if fused.is_some() {
                bc.lm_weight = lm_weight.unwrap_or(cfg.fusion.weight);
                bc.eos_margin = eos_margin.unwrap_or(cfg.fusion.eos_margin);
            } else if net.is_some() {
                bc.lm_weight = lm_weight.unwrap_or(cfg.lm.weight);
            }
            let mut lists = Vec::with_capacity(data.len());
            for u in data.utterances() {
                let mut l = match (&fused, &net) {
                    (Some(lm), _) => beam_search_fused(&model, lm, &u.features, &bc)?,
                    (None, Some(net)) => wfst_beam_search(&model, net, &u.features, &bc)?,
                    (None, None) => beam_search(&model, &u.features, &bc)?,
                };
                l.utt_id = u.id.clone();
                lists.push(l);
            }
            write(&out_dir(cli)?.join("hyps.nbest"), &write_nbest(&lists))?;
        }
        Command::Rescore { nbest: list_path, corpus: corpus_path, rescorers: specs, weights } => {
            let (cfg, _) = load_config(cli, None)?;
            let lists = nbest(list_path)?;
            let data = corpus(corpus_path, Split::Dev)?;
            let feats = matched(&lists, &data)?;
            let loaded = specs.iter().map(|s| parse_rescorer(s)).collect::<Result<Vec<_>>>()?;
            let boxed: Vec<Box<dyn Rescorer + '_>> = loaded.iter().map(|(n, m)| rescorer(n, m)).collect();
            let rs: Vec<&dyn Rescorer> = boxed.iter().map(|b| b.as_ref()).collect();
            let names: Vec<&str> = rs.iter().map(|r| r.name()).collect();
            let weights = match weights {
                Some(p) => {
                    need(p)?;
                    CombinationWeights::load(p)?
                }
                None => {
                    let keep: Vec<usize> = (0..lists.len()).filter(|&i| !lists[i].is_empty()).collect();
                    let r = refs(&data);
                    let grid = WeightGrid::cartesian(&cfg.combine.values()?, rs.len());
                    tune_weights(
                        &keep.iter().map(|&i| lists[i].clone()).collect::<Vec<_>>(),
                        &keep.iter().map(|&i| feats[i]).collect::<Vec<_>>(),
                        &keep.iter().map(|&i| r[i].clone()).collect::<Vec<_>>(),
                        &rs,
                        &grid,
                    )?
                    .weights
                }
            };
            let w = names
                .iter()
                .map(|n| weights.get(n).ok_or_else(|| anyhow!("weights lack an entry for `{n}`")))
                .collect::<Result<Vec<f64>>>()?;
            let out: Vec<NBestList> = lists
                .iter()
                .zip(&feats)
                .map(|(l, f)| apply_weights(l, &names, &score_components(l, f, &rs), &w))
                .collect();
            let dir = out_dir(cli)?;
            write(&dir.join("rescored.nbest"), &write_nbest(&out))?;
            weights.save(&dir.join("weights.txt"))?;
        }
        Command::Union { a, b, corpus: corpus_path, model_a, model_b, lambda, las_only_b } => {
            let la = nbest(a)?;
            let mut lb = nbest(b)?;
            if *las_only_b {
                for h in lb.iter_mut().flat_map(|l| l.hyps.iter_mut()) {
                    h.total = h.components.get("las").copied().unwrap_or(h.total);
                }
            }
            let data = corpus(corpus_path, Split::Test)?;
            let feats = matched(&la, &data)?;
            matched(&lb, &data)?;
            let (ma, mb) = (las(model_a)?, las(model_b)?);
            let (ra, rb) = (LasRescorer::new("a", &ma), LasRescorer::new("b", &mb));
            let out = la
                .iter()
                .zip(&lb)
                .zip(&feats)
                .map(|((x, y), f)| union_cross_rescore(x, y, f, &ra, &rb, *lambda))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            write(&out_dir(cli)?.join("union.nbest"), &write_nbest(&out))?;
        }
        Command::Evaluate { nbest: list_path, corpus: corpus_path, phonemes } => {
            let lists = nbest(list_path)?;
            let data = corpus(corpus_path, Split::Test)?;
            matched(&lists, &data)?;
            let r = refs(&data);
            let hyps: Vec<Vec<String>> =
                lists.iter().map(|l| l.best().map(|h| h.words.clone()).unwrap_or_default()).collect();
            let w = wer(&r, &hyps)?;
            let mut report = serde_json::json!({
                "utterances": r.len(),
                "wer": w.percent(),
                "errors": w.total.errors(),
                "oracle_wer": 100.0 * oracle_wer(&lists, &r)?,
            });
            if let Some(p) = phonemes {
                let UnitCodec::Phoneme(codec) = units(p)? else {
                    bail!("{} does not hold phoneme units", p.display());
                };
                let inv = &codec.inventory;
                let sym = |ws: &[String]| -> Vec<String> {
                    codec.encode(ws).iter().map(|&u| inv.symbol(u).unwrap_or("<unk>").to_string()).collect()
                };
                let pr: Vec<Vec<String>> = r.iter().map(|x| sym(x)).collect();
                let ph: Vec<Vec<String>> = hyps.iter().map(|x| sym(x)).collect();
                report["per"] = per(&pr, &ph)?.percent().into();
            }
            let ids: Vec<String> = data.utterances().iter().map(|u| u.id.clone()).collect();
            let dir = out_dir(cli)?;
            write(&dir.join("alignments.txt"), &alignment_dump(&ids, &r, &hyps))?;
            let text = serde_json::to_string_pretty(&report)? + "\n";
            write(&dir.join("eval.json"), &text)?;
            print!("{text}");
        }
        Command::Report { run } => {
            let path = run.join("tables.json");
            need(&path)?;
            let text = fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
            let tables: Vec<Table> =
                serde_json::from_str(&text).with_context(|| format!("bad tables file {}", path.display()))?;
            let dir = cli.out.as_ref().map(|_| out_dir(cli)).transpose()?;
            for (i, t) in tables.iter().enumerate() {
                println!("{}", t.to_txt());
                if let Some(d) = &dir {
                    t.save(d, &format!("table{}", i + 1))?;
                }
            }
        }
        Command::RunExperiment { preset } => {
            let (cfg, base) = load_config(cli, preset.as_deref())?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name));
            let outcome = run_experiment(&cfg, &base, &out)?;
            for t in &outcome.tables {
                println!("{}", t.to_txt());
            }
            println!("{}", serde_json::to_string_pretty(&outcome.summary.checks)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
