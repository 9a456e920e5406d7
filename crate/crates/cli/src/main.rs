use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use wavelang::bpe::{fit_bpe_curve, MergeTable};
use wavelang::codec::{decode, encode, Alphabet, SequenceHeader, ThresholdMode, TokenSequence};
use wavelang::dataset::{load_idx, pad_to_dyadic, Image, RawImage};
use wavelang::dwt::{forward_dwt, inverse_dwt, WaveletId};
use wavelang::features::{fit_ll_prior, fit_threshold_prior, LLSeedPrior, ThresholdPrior, DEFAULT_RIDGE};
use wavelang::model::{generate, ContextModel, NextTokenModel, Priors, Sampler, DEFAULT_LAMBDA, DEFAULT_ORDER};

#[derive(Parser, Debug)]
#[command(name = "wavelang", version, about = "Wavelet bit-plane tokenization of small images")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Shared {
    #[arg(long, global = true, default_value = "haar", value_parser = parse_wavelet)]
    wavelet: WaveletId,
    #[arg(long, global = true, value_enum, default_value_t = AlphabetArg::Zeroblock)]
    alphabet: AlphabetArg,
    #[arg(long = "threshold-mode", global = true, value_enum, default_value_t = ModeArg::PerImage)]
    threshold_mode: ModeArg,
    /// Exponent of the final threshold, `T_f = 2^tfinal`.
    #[arg(long, global = true, default_value_t = -3, allow_negative_numbers = true)]
    tfinal: i32,
    #[arg(long, global = true, default_value_t = 5)]
    m: u32,
    #[arg(long = "exclude-ll", global = true)]
    exclude_ll: bool,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum AlphabetArg {
    Zeroblock,
    Zerotree,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Global,
    PerImage,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum SamplerArg {
    Greedy,
    TopK,
    TopP,
}

fn parse_wavelet(s: &str) -> Result<WaveletId, String> {
    s.parse().map_err(|e| format!("{e}"))
}

#[derive(Args, Debug)]
struct DatasetArgs {
    /// IDX image file.
    #[arg(long)]
    images: PathBuf,
    /// IDX label file.
    #[arg(long)]
    labels: PathBuf,
    /// Use only the first N images.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tokenize a dataset into one `.wtk` file per image.
    Encode(DatasetArgs),
    /// Decode `.wtk` files to PGM images.
    Decode {
        /// A `.wtk` file or a directory of them.
        #[arg(long)]
        input: PathBuf,
        /// Keep this fraction of each token sequence.
        #[arg(long)]
        prefix: Option<f64>,
        /// Original dataset, to report per-image max coefficient error.
        #[arg(long, requires = "labels")]
        images: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Length and threshold statistics for a `.wtk` corpus or a raw dataset.
    Stats {
        #[arg(long, conflicts_with = "images")]
        input: Option<PathBuf>,
        #[arg(long, requires = "labels")]
        images: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Fit the class-conditional LL Gaussian prior.
    FitSeed {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long, default_value_t = DEFAULT_RIDGE)]
        ridge: f64,
    },
    /// Fit the per-class initial-threshold prior from a `.wtk` corpus.
    FitThreshold {
        #[arg(long)]
        input: PathBuf,
    },
    /// Fit the order-N context model from a `.wtk` corpus.
    FitModel {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ORDER)]
        order: usize,
        #[arg(long, default_value_t = DEFAULT_LAMBDA)]
        lambda: f64,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Generate token sequences and images.
    Generate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "threshold-prior")]
        threshold_prior: Option<PathBuf>,
        #[arg(long = "seed-prior")]
        seed_prior: Option<PathBuf>,
        #[arg(long)]
        class: Option<u8>,
        #[arg(long, value_enum, default_value_t = SamplerArg::TopK)]
        sampler: SamplerArg,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 0.6)]
        p: f64,
        #[arg(long, default_value_t = 1)]
        n: usize,
    },
    /// Fit a BPE merge table on a `.wtk` corpus.
    BpeFit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vocab: usize,
    },
    /// Apply a merge table to a `.wtk` corpus.
    BpeApply {
        #[arg(long)]
        merges: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Mean sequence length as a function of vocabulary size.
    BpeCurve {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vocab: usize,
    },
}

impl Shared {
    fn alphabet(&self) -> Alphabet {
        match self.alphabet {
            AlphabetArg::Zeroblock => Alphabet::ZeroBlock,
            AlphabetArg::Zerotree => Alphabet::ZeroTree,
        }
    }

    fn mode(&self) -> ThresholdMode {
        match self.threshold_mode {
            ModeArg::Global => ThresholdMode::Global,
            ModeArg::PerImage => ThresholdMode::PerImage,
        }
    }

    fn header(&self, alphabet: Alphabet, class: Option<u8>) -> SequenceHeader {
        let mut h = SequenceHeader::new(alphabet, self.wavelet, self.m, self.mode(), self.tfinal);
        h.class = class;
        h.exclude_ll = self.exclude_ll;
        h
    }

    fn validate(&self) -> Result<()> {
        if self.m < 2 {
            bail!("--m must be at least 2");
        }
        Ok(())
    }
}

fn load_raw(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Vec<RawImage>> {
    let mut imgs = load_idx(images, labels)?;
    if let Some(n) = limit {
        imgs.truncate(n);
    }
    Ok(imgs)
}

fn load_padded(images: &Path, labels: &Path, limit: Option<usize>, m: u32) -> Result<Vec<Image>> {
    load_raw(images, labels, limit)?
        .iter()
        .map(|r| pad_to_dyadic(r, m).map_err(Into::into))
        .collect()
}

fn wtk_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "wtk"))
        .collect();
    files.sort();
    Ok(files)
}

fn read_corpus(input: &Path, limit: Option<usize>) -> Result<Vec<(PathBuf, TokenSequence)>> {
    let mut files = wtk_files(input)?;
    if let Some(n) = limit {
        files.truncate(n);
    }
    files
        .into_par_iter()
        .map(|p| {
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            let seq = TokenSequence::from_wtk(&text).with_context(|| format!("parsing {}", p.display()))?;
            Ok((p, seq))
        })
        .collect()
}

fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    let size = img.size();
    let mut bytes = format!("P5\n{size} {size}\n255\n").into_bytes();
    bytes.extend(img.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Default)]
struct LengthStats {
    count: usize,
    total: usize,
    max: usize,
}

impl LengthStats {
    fn add(&mut self, len: usize) {
        self.count += 1;
        self.total += len;
        self.max = self.max.max(len);
    }

    fn mean(&self) -> f64 {
        self.total as f64 / self.count.max(1) as f64
    }
}

fn report_lengths(label: &str, seqs: &[&TokenSequence]) -> String {
    let mut all = LengthStats::default();
    let mut by_class: BTreeMap<Option<u8>, LengthStats> = BTreeMap::new();
    for s in seqs {
        all.add(s.len());
        by_class.entry(s.header.class).or_default().add(s.len());
    }
    let mut out = format!(
        "{label}: count={} mean_length={:.1} max_length={}\n",
        all.count,
        all.mean(),
        all.max
    );
    out.push_str("csv,variant,class,count,mean_length,max_length\n");
    out.push_str(&format!("csv,{label},all,{},{:.3},{}\n", all.count, all.mean(), all.max));
    for (c, st) in &by_class {
        let c = c.map_or("none".to_string(), |c| c.to_string());
        out.push_str(&format!("csv,{label},{c},{},{:.3},{}\n", st.count, st.mean(), st.max));
    }
    out
}

fn report_thresholds(seqs: &[&TokenSequence]) -> String {
    let per_image: Vec<&SequenceHeader> = seqs
        .iter()
        .map(|s| &s.header)
        .filter(|h| h.threshold_mode == ThresholdMode::PerImage)
        .collect();
    if per_image.is_empty() {
        return String::new();
    }
    let mut hist: BTreeMap<(Option<u8>, i32), usize> = BTreeMap::new();
    let mut support = std::collections::BTreeSet::new();
    for h in &per_image {
        let t = h.tilde_m.unwrap_or_default();
        support.insert(t);
        *hist.entry((h.class, t)).or_default() += 1;
    }
    let mut out = format!("l={} support={:?}\n", support.len(), support);
    out.push_str("csv,class,tilde_m,count\n");
    for ((c, t), n) in hist {
        let c = c.map_or("none".to_string(), |c| c.to_string());
        out.push_str(&format!("csv,{c},{t},{n}\n"));
    }
    out
}

fn encode_all(images: &[Image], shared: &Shared, alphabet: Alphabet) -> Result<Vec<TokenSequence>> {
    images
        .par_iter()
        .map(|img| {
            let coeffs = forward_dwt(img, shared.wavelet, shared.m - 1)?;
            Ok(encode(&coeffs, &shared.header(alphabet, img.label))?)
        })
        .collect()
}

fn cmd_encode(shared: &Shared, data: &DatasetArgs) -> Result<()> {
    let images = load_padded(&data.images, &data.labels, data.limit, shared.m)?;
    fs::create_dir_all(&shared.out)?;
    let seqs = encode_all(&images, shared, shared.alphabet())?;
    seqs.par_iter().enumerate().try_for_each(|(i, s)| {
        write(&shared.out.join(format!("{i:06}.wtk")), &s.to_wtk())
    })?;
    let refs: Vec<&TokenSequence> = seqs.iter().collect();
    let summary = report_lengths(shared.alphabet().as_str(), &refs);
    write(&shared.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn cmd_decode(shared: &Shared, input: &Path, prefix: Option<f64>, original: Option<(&Path, &Path)>) -> Result<()> {
    if let Some(f) = prefix {
        if !(0.0..=1.0).contains(&f) {
            bail!("--prefix must lie in [0, 1]");
        }
    }
    let corpus = read_corpus(input, None)?;
    let originals = match original {
        Some((i, l)) => Some(load_raw(i, l, None)?),
        None => None,
    };
    fs::create_dir_all(&shared.out)?;
    let rows: Vec<String> = corpus
        .par_iter()
        .map(|(path, seq)| -> Result<String> {
            let stop = prefix.map(|f| (f * seq.len() as f64).floor() as usize);
            let coeffs = decode(seq, stop).with_context(|| format!("decoding {}", path.display()))?;
            let img = inverse_dwt(&coeffs)?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
            write_pgm(&shared.out.join(format!("{stem}.pgm")), &img)?;
            let err = match &originals {
                Some(raws) => {
                    let idx: usize = stem
                        .parse()
                        .with_context(|| format!("{stem}: file name is not a dataset index"))?;
                    let raw = raws.get(idx).with_context(|| format!("index {idx} outside the dataset"))?;
                    let truth = forward_dwt(&pad_to_dyadic(raw, seq.header.m)?, seq.header.wavelet, seq.header.m - 1)?;
                    format!("{:e}", truth.max_abs_diff(&coeffs))
                }
                None => "nan".into(),
            };
            Ok(format!("{stem},{},{err}\n", stop.unwrap_or(seq.len())))
        })
        .collect::<Result<_>>()?;
    let mut csv = String::from("file,tokens_used,max_coefficient_error\n");
    rows.iter().for_each(|r| csv.push_str(r));
    write(&shared.out.join("decode.csv"), &csv)?;
    println!("decoded {} sequences into {}", corpus.len(), shared.out.display());
    Ok(())
}

fn cmd_stats(shared: &Shared, input: Option<&Path>, dataset: Option<(&Path, &Path)>, limit: Option<usize>) -> Result<()> {
    let mut report = String::new();
    match (input, dataset) {
        (Some(input), _) => {
            let corpus = read_corpus(input, limit)?;
            if corpus.is_empty() {
                bail!("empty corpus: no .wtk files under {}", input.display());
            }
            let mut by_alphabet: BTreeMap<&str, Vec<&TokenSequence>> = BTreeMap::new();
            for (_, s) in &corpus {
                by_alphabet.entry(s.header.alphabet.as_str()).or_default().push(s);
            }
            for (a, seqs) in &by_alphabet {
                report.push_str(&report_lengths(a, seqs));
            }
            let all: Vec<&TokenSequence> = corpus.iter().map(|(_, s)| s).collect();
            report.push_str(&report_thresholds(&all));
        }
        (None, Some((images, labels))) => {
            let imgs = load_padded(images, labels, limit, shared.m)?;
            if imgs.is_empty() {
                bail!("empty corpus");
            }
            let mut first = None;
            for a in [Alphabet::ZeroBlock, Alphabet::ZeroTree] {
                let seqs = encode_all(&imgs, shared, a)?;
                let refs: Vec<&TokenSequence> = seqs.iter().collect();
                report.push_str(&report_lengths(a.as_str(), &refs));
                first.get_or_insert(seqs);
            }
            let seqs = first.unwrap_or_default();
            let refs: Vec<&TokenSequence> = seqs.iter().collect();
            report.push_str(&report_thresholds(&refs));
        }
        (None, None) => bail!("stats needs --input or --images/--labels"),
    }
    fs::create_dir_all(&shared.out)?;
    write(&shared.out.join("stats.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn cmd_fit_seed(shared: &Shared, data: &DatasetArgs, ridge: f64) -> Result<()> {
    let images = load_padded(&data.images, &data.labels, data.limit, shared.m)?;
    let coeffs = images
        .par_iter()
        .map(|img| Ok((forward_dwt(img, shared.wavelet, shared.m - 1)?, img.label.unwrap_or(0))))
        .collect::<Result<Vec<_>>>()?;
    let num_classes = coeffs.iter().map(|c| c.1).max().map_or(0, |c| c + 1);
    let prior = fit_ll_prior(coeffs.iter().map(|(c, l)| (c, *l)), ridge, num_classes)?;
    fs::create_dir_all(&shared.out)?;
    let path = shared.out.join("ll_prior.txt");
    write(&path, &prior.to_text())?;
    println!("fitted LL prior for {} classes -> {}", prior.classes.len(), path.display());
    Ok(())
}

fn cmd_fit_threshold(shared: &Shared, input: &Path) -> Result<()> {
    let corpus = read_corpus(input, None)?;
    let prior = fit_threshold_prior(corpus.iter().map(|(_, s)| &s.header))?;
    fs::create_dir_all(&shared.out)?;
    let path = shared.out.join("threshold_prior.txt");
    write(&path, &prior.to_text())?;
    println!("l={} support={:?} -> {}", prior.l(), prior.support, path.display());
    Ok(())
}

fn cmd_fit_model(shared: &Shared, input: &Path, order: usize, lambda: f64, limit: Option<usize>) -> Result<()> {
    if lambda < 0.0 {
        bail!("--lambda must be non-negative");
    }
    let corpus: Vec<TokenSequence> = read_corpus(input, limit)?.into_iter().map(|(_, s)| s).collect();
    let model = ContextModel::fit(&corpus, order, lambda)?;
    fs::create_dir_all(&shared.out)?;
    let path = shared.out.join("model.txt");
    write(&path, &model.to_text())?;
    println!(
        "fitted order-{order} model on {} sequences ({} contexts) -> {}",
        corpus.len(),
        model.node_count(),
        path.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    shared: &Shared,
    model_path: &Path,
    threshold_path: Option<&Path>,
    seed_path: Option<&Path>,
    class: Option<u8>,
    sampler: Sampler,
    n: usize,
) -> Result<()> {
    let read = |p: &Path| fs::read_to_string(p).with_context(|| format!("reading {}", p.display()));
    let model = ContextModel::from_text(&read(model_path)?)?;
    let threshold: Option<ThresholdPrior> = threshold_path.map(|p| Ok::<_, anyhow::Error>(ThresholdPrior::from_text(&read(p)?)?)).transpose()?;
    let ll: Option<LLSeedPrior> = seed_path.map(|p| Ok::<_, anyhow::Error>(LLSeedPrior::from_text(&read(p)?)?)).transpose()?;
    if shared.mode() == ThresholdMode::PerImage && threshold.is_none() {
        bail!("per-image threshold mode needs --threshold-prior");
    }
    let template = shared.header(model.alphabet(), class);
    fs::create_dir_all(&shared.out)?;
    let lines: Vec<String> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<String> {
            let mut rng = ChaCha8Rng::seed_from_u64(shared.seed);
            rng.set_stream(i as u64);
            let priors = Priors {
                threshold: threshold.as_ref(),
                ll_seed: ll.as_ref(),
            };
            let g = generate(&model, &template, priors, sampler, &mut rng)?;
            // the sequence must decode on its own
            decode(&g.sequence, None)?;
            write(&shared.out.join(format!("gen_{i:03}.wtk")), &g.sequence.to_wtk())?;
            write_pgm(&shared.out.join(format!("gen_{i:03}.pgm")), &g.image)?;
            Ok(format!("gen_{i:03},{},{}\n", g.sequence.len(), g.sequence.header.tilde_m.map_or("none".into(), |t| t.to_string())))
        })
        .collect::<Result<_>>()?;
    let mut csv = String::from("name,length,tilde_m\n");
    lines.iter().for_each(|l| csv.push_str(l));
    write(&shared.out.join("generate.csv"), &csv)?;
    println!("generated {n} sequences into {}", shared.out.display());
    Ok(())
}

fn corpus_ids(input: &Path) -> Result<(Alphabet, Vec<Vec<u32>>)> {
    let corpus = read_corpus(input, None)?;
    let first = corpus.first().with_context(|| format!("empty corpus under {}", input.display()))?;
    let alphabet = first.1.header.alphabet;
    if corpus.iter().any(|(_, s)| s.header.alphabet != alphabet) {
        bail!("corpus mixes alphabets");
    }
    Ok((alphabet, corpus.iter().map(|(_, s)| s.ids()).collect()))
}

fn cmd_bpe_fit(shared: &Shared, input: &Path, vocab: usize) -> Result<()> {
    let (alphabet, ids) = corpus_ids(input)?;
    let fit = fit_bpe_curve(&ids, alphabet.size() as u32, vocab)?;
    fs::create_dir_all(&shared.out)?;
    let path = shared.out.join("merges.txt");
    write(&path, &fit.table.to_text())?;
    println!(
        "{} merges, vocabulary {}, mean length {:.1} -> {:.1}; {}",
        fit.table.merges.len(),
        fit.table.vocab_size(),
        fit.mean_lengths[0],
        fit.mean_lengths.last().copied().unwrap_or_default(),
        path.display()
    );
    Ok(())
}

fn cmd_bpe_apply(shared: &Shared, merges: &Path, input: &Path) -> Result<()> {
    let corpus = read_corpus(input, None)?;
    let first = corpus.first().with_context(|| format!("empty corpus under {}", input.display()))?;
    let base = first.1.header.alphabet.size() as u32;
    let table = MergeTable::from_text(&fs::read_to_string(merges)?, base)?;
    fs::create_dir_all(&shared.out)?;
    let lens: Vec<usize> = corpus
        .par_iter()
        .map(|(path, seq)| -> Result<usize> {
            let ids = seq.ids();
            let merged = table.apply(&ids)?;
            if table.unapply(&merged)? != ids {
                bail!("{}: merge round trip failed", path.display());
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("seq");
            let text: Vec<String> = merged.iter().map(|i| i.to_string()).collect();
            write(&shared.out.join(format!("{stem}.bpe")), &(text.join(" ") + "\n"))?;
            Ok(merged.len())
        })
        .collect::<Result<_>>()?;
    let mean = lens.iter().sum::<usize>() as f64 / lens.len().max(1) as f64;
    println!("applied {} merges to {} sequences; mean length {mean:.1}", table.merges.len(), lens.len());
    Ok(())
}

fn cmd_bpe_curve(shared: &Shared, input: &Path, vocab: usize) -> Result<()> {
    let (alphabet, ids) = corpus_ids(input)?;
    let fit = fit_bpe_curve(&ids, alphabet.size() as u32, vocab)?;
    let mut csv = String::from("vocab_size,mean_length\n");
    for (v, m) in fit.curve() {
        csv.push_str(&format!("{v},{m:.3}\n"));
    }
    fs::create_dir_all(&shared.out)?;
    write(&shared.out.join("bpe_curve.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let shared = &cli.shared;
    shared.validate()?;
    match &cli.command {
        Command::Encode(data) => cmd_encode(shared, data),
        Command::Decode {
            input,
            prefix,
            images,
            labels,
        } => cmd_decode(shared, input, *prefix, images.as_deref().zip(labels.as_deref())),
        Command::Stats {
            input,
            images,
            labels,
            limit,
        } => cmd_stats(shared, input.as_deref(), images.as_deref().zip(labels.as_deref()), *limit),
        Command::FitSeed { data, ridge } => cmd_fit_seed(shared, data, *ridge),
        Command::FitThreshold { input } => cmd_fit_threshold(shared, input),
        Command::FitModel {
            input,
            order,
            lambda,
            limit,
        } => cmd_fit_model(shared, input, *order, *lambda, *limit),
        Command::Generate {
            model,
            threshold_prior,
            seed_prior,
            class,
            sampler,
            k,
            p,
            n,
        } => {
            let sampler = match sampler {
                SamplerArg::Greedy => Sampler::Greedy,
                SamplerArg::TopK => Sampler::TopK(*k),
                SamplerArg::TopP => Sampler::TopP(*p),
            }
            .validate()?;
            cmd_generate(shared, model, threshold_prior.as_deref(), seed_prior.as_deref(), *class, sampler, *n)
        }
        Command::BpeFit { input, vocab } => cmd_bpe_fit(shared, input, *vocab),
        Command::BpeApply { merges, input } => cmd_bpe_apply(shared, merges, input),
        Command::BpeCurve { input, vocab } => cmd_bpe_curve(shared, input, *vocab),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}
