//! Synthetic personalized-sentiment corpus with user-disjoint A/B parts,
//! and the line-oriented dataset file format.
//!
//! Labels follow a known rule: a text score (mean token polarity times a
//! gain) is shifted by the writer's bias and quantized into unit-width
//! classes centred on zero. With every bias at zero the label depends on the
//! text alone; with biases spanning more than a class width, a model that
//! ignores the user has a strictly lower accuracy ceiling.
//!
//! File format, one record per line:
//!
//! ```text
//! <user>\t<label>\t<token> <token> ...
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::config::{parse_list, parse_value, render_list, Configurable, KvConfig};
use crate::error::{Error, Result};
use crate::linalg::Rng;
use crate::users::UserId;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub tokens: Vec<u32>,
    pub label: usize,
    pub user: UserId,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn users(&self) -> BTreeSet<UserId> {
        self.samples.iter().map(|s| s.user.clone()).collect()
    }

    pub fn for_user(&self, user: &UserId) -> Dataset {
        Dataset::new(self.samples.iter().filter(|s| &s.user == user).cloned().collect())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self, n_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; n_classes];
        for s in &self.samples {
            if s.label < n_classes {
                counts[s.label] += 1;
            }
        }
        counts
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            let toks: Vec<String> = s.tokens.iter().map(u32::to_string).collect();
            out.push_str(&format!("{}\t{}\t{}\n", s.user, s.label, toks.join(" ")));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut samples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: line_no, msg };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(err(format!(
                    "expected 3 tab-separated fields (user, label, tokens), found {}",
                    fields.len()
                )));
            }
            let user = UserId::new(fields[0]).map_err(|e| err(e.to_string()))?;
            let label = fields[1]
                .parse::<usize>()
                .map_err(|e| err(format!("bad label {:?}: {e}", fields[1])))?;
            let tokens = fields[2]
                .split(' ')
                .filter(|t| !t.is_empty())
                .map(|t| t.parse::<u32>().map_err(|e| err(format!("bad token {t:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if tokens.is_empty() {
                return Err(err("empty token sequence".into()));
            }
            samples.push(Sample {
                tokens,
                label,
                user,
            });
        }
        Ok(Self { samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// The first `k` training samples of every user, in stored order.
pub fn few_shot_view(train: &Dataset, k: usize) -> Result<Dataset> {
    let mut taken: BTreeMap<&UserId, usize> = BTreeMap::new();
    for s in &train.samples {
        taken.entry(&s.user).or_insert(0);
    }
    let mut out = Vec::new();
    for s in &train.samples {
        let n = taken.get_mut(&s.user).expect("user seen above");
        if *n < k {
            *n += 1;
            out.push(s.clone());
        }
    }
    if let Some((user, n)) = taken.iter().find(|(_, &n)| n < k) {
        return Err(Error::Data(format!(
            "user {user} has only {n} training samples, {k} requested"
        )));
    }
    Ok(Dataset::new(out))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSpec {
    pub vocab_size: usize,
    /// Token ids `0..n_sentiment` carry polarity; the rest are neutral.
    pub n_sentiment: usize,
    pub n_classes: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a position holds a sentiment token.
    pub sentiment_rate: f64,
    /// Multiplies the mean token polarity to form the text score.
    pub score_gain: f64,
    pub class_width: f64,
    /// Per-user bias, in class widths; each user draws one uniformly.
    pub bias_levels: Vec<f64>,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            n_sentiment: 24,
            n_classes: 5,
            min_len: 12,
            max_len: 32,
            sentiment_rate: 0.5,
            score_gain: 3.0,
            class_width: 1.0,
            bias_levels: vec![-1.5, 0.0, 1.5],
        }
    }
}

const POLARITY_LEVELS: [f64; 4] = [0.5, 1.0, 1.5, 2.0];

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_classes < 2 {
            return bad(format!("quantizer needs at least 2 classes, got {}", self.n_classes));
        }
        if !(self.class_width > 0.0) {
            return bad("class_width must be > 0".into());
        }
        if self.n_sentiment < 2 || self.n_sentiment >= self.vocab_size {
            return bad(format!(
                "need 2 <= n_sentiment < vocab_size, got {} of {}",
                self.n_sentiment, self.vocab_size
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 1 <= min_len <= max_len".into());
        }
        if !(0.0..=1.0).contains(&self.sentiment_rate) {
            return bad("sentiment_rate must lie in [0, 1]".into());
        }
        if self.bias_levels.is_empty() {
            return bad("bias_levels must not be empty".into());
        }
        Ok(())
    }

    /// Polarity of a token: sentiment tokens alternate sign and cycle
    /// through four magnitudes; neutral tokens are zero.
    pub fn polarity(&self, token: u32) -> f64 {
        let t = token as usize;
        if t >= self.n_sentiment {
            return 0.0;
        }
        let magnitude = POLARITY_LEVELS[(t / 2) % POLARITY_LEVELS.len()];
        if t.is_multiple_of(2) {
            magnitude
        } else {
            -magnitude
        }
    }

    pub fn text_score(&self, tokens: &[u32]) -> f64 {
        let sum: f64 = tokens.iter().map(|&t| self.polarity(t)).sum();
        self.score_gain * sum / tokens.len() as f64
    }

    /// Unit-width bins centred on zero, clamped to the class range.
    pub fn quantize(&self, score: f64) -> usize {
        let raw = (score / self.class_width + self.n_classes as f64 / 2.0).floor();
        raw.clamp(0.0, (self.n_classes - 1) as f64) as usize
    }

    /// The generating label rule; `bias` is in class widths.
    pub fn label(&self, tokens: &[u32], bias: f64) -> usize {
        self.quantize(self.text_score(tokens) + bias * self.class_width)
    }

    fn sample_tokens(&self, rng: &mut Rng) -> Vec<u32> {
        let len = self.min_len + rng.below(self.max_len - self.min_len + 1);
        let mood = rng.uniform(-1.0, 1.0);
        let half = self.n_sentiment / 2;
        (0..len)
            .map(|_| {
                if rng.bernoulli(self.sentiment_rate) {
                    // even ids are positive, odd ids negative
                    let positive = rng.bernoulli((1.0 + mood) / 2.0);
                    let k = rng.below(half);
                    (2 * k + usize::from(!positive)) as u32
                } else {
                    (self.n_sentiment + rng.below(self.vocab_size - self.n_sentiment)) as u32
                }
            })
            .collect()
    }
}

impl Configurable for GeneratorSpec {
    fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "vocab_size" => self.vocab_size = parse_value(key, value)?,
            "n_sentiment" => self.n_sentiment = parse_value(key, value)?,
            "n_classes" => self.n_classes = parse_value(key, value)?,
            "min_len" => self.min_len = parse_value(key, value)?,
            "max_len" => self.max_len = parse_value(key, value)?,
            "sentiment_rate" => self.sentiment_rate = parse_value(key, value)?,
            "score_gain" => self.score_gain = parse_value(key, value)?,
            "class_width" => self.class_width = parse_value(key, value)?,
            "bias_levels" => self.bias_levels = parse_list(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("n_sentiment".into(), self.n_sentiment.to_string()),
            ("n_classes".into(), self.n_classes.to_string()),
            ("min_len".into(), self.min_len.to_string()),
            ("max_len".into(), self.max_len.to_string()),
            ("sentiment_rate".into(), format!("{:?}", self.sentiment_rate)),
            ("score_gain".into(), format!("{:?}", self.score_gain)),
            ("class_width".into(), format!("{:?}", self.class_width)),
            ("bias_levels".into(), render_list(&self.bias_levels)),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub n_users_a: usize,
    pub n_users_b: usize,
    pub samples_per_user_a: usize,
    pub samples_per_user_b: usize,
    pub train_frac: f64,
    pub dev_frac: f64,
    pub test_frac: f64,
    /// Every class must reach this share of every split; `0` disables the check.
    pub min_class_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            n_users_a: 50,
            n_users_b: 20,
            samples_per_user_a: 200,
            samples_per_user_b: 40,
            train_frac: 0.6,
            dev_frac: 0.1,
            test_frac: 0.3,
            min_class_frac: 0.05,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_users_a == 0 || self.n_users_b == 0 {
            return bad("both parts need at least one user");
        }
        let fracs = [self.train_frac, self.dev_frac, self.test_frac];
        if fracs.iter().any(|f| !(*f > 0.0)) || (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("train/dev/test fractions must be positive and sum to 1");
        }
        for n in [self.samples_per_user_a, self.samples_per_user_b] {
            let (tr, dv, te) = self.split_counts(n);
            if tr == 0 || dv == 0 || te == 0 {
                return bad("samples per user too small for a non-empty train/dev/test split");
            }
        }
        if !(0.0..1.0).contains(&self.min_class_frac) {
            return bad("min_class_frac must lie in [0, 1)");
        }
        Ok(())
    }

    /// Per-user `(train, dev, test)` counts.
    pub fn split_counts(&self, n: usize) -> (usize, usize, usize) {
        let train = (n as f64 * self.train_frac).round() as usize;
        let dev = (n as f64 * self.dev_frac).round() as usize;
        let test = n.saturating_sub(train + dev);
        (train, dev, test)
    }
}

impl Configurable for SplitSpec {
    fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "n_users_a" => self.n_users_a = parse_value(key, value)?,
            "n_users_b" => self.n_users_b = parse_value(key, value)?,
            "samples_per_user_a" => self.samples_per_user_a = parse_value(key, value)?,
            "samples_per_user_b" => self.samples_per_user_b = parse_value(key, value)?,
            "train_frac" => self.train_frac = parse_value(key, value)?,
            "dev_frac" => self.dev_frac = parse_value(key, value)?,
            "test_frac" => self.test_frac = parse_value(key, value)?,
            "min_class_frac" => self.min_class_frac = parse_value(key, value)?,
            "data_seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("n_users_a".into(), self.n_users_a.to_string()),
            ("n_users_b".into(), self.n_users_b.to_string()),
            ("samples_per_user_a".into(), self.samples_per_user_a.to_string()),
            ("samples_per_user_b".into(), self.samples_per_user_b.to_string()),
            ("train_frac".into(), format!("{:?}", self.train_frac)),
            ("dev_frac".into(), format!("{:?}", self.dev_frac)),
            ("test_frac".into(), format!("{:?}", self.test_frac)),
            ("min_class_frac".into(), format!("{:?}", self.min_class_frac)),
            ("data_seed".into(), self.seed.to_string()),
        ]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &Dataset)> {
        [("train", &self.train), ("dev", &self.dev), ("test", &self.test)].into_iter()
    }

    pub fn get(&self, name: &str) -> Option<&Dataset> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

/// A generated corpus: user-disjoint parts A (full-shot) and B (cold start).
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub generator: GeneratorSpec,
    pub split: SplitSpec,
    /// Bias of every user, in class widths.
    pub biases: BTreeMap<UserId, f64>,
    pub a: Splits,
    pub b: Splits,
}

const MAX_BALANCE_ATTEMPTS: u64 = 64;

pub fn generate(gen: &GeneratorSpec, split: &SplitSpec) -> Result<Corpus> {
    gen.validate()?;
    split.validate()?;
    for attempt in 0..MAX_BALANCE_ATTEMPTS {
        let seed = split.seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let corpus = generate_once(gen, split, seed)?;
        if corpus.is_balanced(split.min_class_frac) {
            return Ok(corpus);
        }
    }
    Err(Error::Data(format!(
        "no class-balanced corpus after {MAX_BALANCE_ATTEMPTS} attempts; \
         lower min_class_frac or adjust score_gain"
    )))
}

fn generate_once(gen: &GeneratorSpec, split: &SplitSpec, seed: u64) -> Result<Corpus> {
    let mut rng = Rng::new(seed);
    let mut biases = BTreeMap::new();
    let mut part = |prefix: &str, n_users: usize, per_user: usize, rng: &mut Rng| -> Result<Splits> {
        let (n_train, n_dev, _) = split.split_counts(per_user);
        let mut splits = Splits::default();
        for u in 0..n_users {
            let user = UserId::new(format!("{prefix}{u:03}"))?;
            let bias = gen.bias_levels[rng.below(gen.bias_levels.len())];
            biases.insert(user.clone(), bias);
            for i in 0..per_user {
                let tokens = gen.sample_tokens(rng);
                let label = gen.label(&tokens, bias);
                let sample = Sample {
                    tokens,
                    label,
                    user: user.clone(),
                };
                let target = if i < n_train {
                    &mut splits.train
                } else if i < n_train + n_dev {
                    &mut splits.dev
                } else {
                    &mut splits.test
                };
                target.samples.push(sample);
            }
        }
        rng.shuffle(&mut splits.train.samples);
        rng.shuffle(&mut splits.dev.samples);
        rng.shuffle(&mut splits.test.samples);
        Ok(splits)
    };
    let a = part("a", split.n_users_a, split.samples_per_user_a, &mut rng)?;
    let b = part("b", split.n_users_b, split.samples_per_user_b, &mut rng)?;
    Ok(Corpus {
        generator: gen.clone(),
        split: split.clone(),
        biases,
        a,
        b,
    })
}

impl Corpus {
    pub fn part(&self, name: &str) -> Option<&Splits> {
        match name {
            "a" | "A" => Some(&self.a),
            "b" | "B" => Some(&self.b),
            _ => None,
        }
    }

    pub fn is_balanced(&self, min_frac: f64) -> bool {
        let n = self.generator.n_classes;
        [&self.a, &self.b].iter().all(|s| {
            s.iter().all(|(_, d)| {
                let counts = d.class_counts(n);
                counts
                    .iter()
                    .all(|&c| c as f64 >= min_frac * d.len() as f64)
            })
        })
    }

    /// Re-derives every label from its tokens and stored user bias.
    pub fn labels_follow_rule(&self) -> bool {
        [&self.a, &self.b].iter().all(|s| {
            s.iter().all(|(_, d)| {
                d.samples.iter().all(|smp| {
                    self.biases
                        .get(&smp.user)
                        .is_some_and(|&b| self.generator.label(&smp.tokens, b) == smp.label)
                })
            })
        })
    }

    /// Accuracy ceilings on `data`: `(generic, personalized)`.
    ///
    /// The personalized ceiling is 1 because labels are a deterministic
    /// function of text and user. A generic predictor only knows the bias
    /// prior (uniform over `bias_levels`), so its best achievable accuracy
    /// per sample is the largest share of bias levels that agree on a label.
    pub fn bayes_ceilings(&self, data: &Dataset) -> (f64, f64) {
        let levels = &self.generator.bias_levels;
        let mut total = 0.0;
        for s in &data.samples {
            let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
            for &b in levels {
                *votes.entry(self.generator.label(&s.tokens, b)).or_default() += 1;
            }
            total += *votes.values().max().unwrap_or(&0) as f64 / levels.len() as f64;
        }
        (total / data.len().max(1) as f64, 1.0)
    }

    pub fn config(&self) -> KvConfig {
        let mut pairs = self.generator.to_pairs();
        pairs.extend(self.split.to_pairs());
        KvConfig::from_pairs(pairs)
    }

    /// Writes `{a,b}_{train,dev,test}.tsv`, `users.tsv` (user, bias) and
    /// `corpus.cfg` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (part, splits) in [("a", &self.a), ("b", &self.b)] {
            for (name, d) in splits.iter() {
                d.save(&dir.join(format!("{part}_{name}.tsv")))?;
            }
        }
        let users: String = self
            .biases
            .iter()
            .map(|(u, b)| format!("{u}\t{b:?}\n"))
            .collect();
        fs::write(dir.join("users.tsv"), users)?;
        fs::write(dir.join("corpus.cfg"), self.config().render())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg = KvConfig::load(&dir.join("corpus.cfg"))?;
        let mut generator = GeneratorSpec::default();
        let mut split = SplitSpec::default();
        cfg.apply(&mut [&mut generator, &mut split])?;
        let mut biases = BTreeMap::new();
        for (i, line) in fs::read_to_string(dir.join("users.tsv"))?.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let (u, b) = line
                .split_once('\t')
                .ok_or_else(|| err("expected user<TAB>bias".into()))?;
            let bias: f64 = b.parse().map_err(|e| err(format!("bad bias: {e}")))?;
            biases.insert(UserId::new(u).map_err(|e| err(e.to_string()))?, bias);
        }
        let load = |name: &str| Dataset::load(&dir.join(name));
        Ok(Self {
            generator,
            split,
            biases,
            a: Splits {
                train: load("a_train.tsv")?,
                dev: load("a_dev.tsv")?,
                test: load("a_test.tsv")?,
            },
            b: Splits {
                train: load("b_train.tsv")?,
                dev: load("b_dev.tsv")?,
                test: load("b_test.tsv")?,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_split(seed: u64) -> SplitSpec {
        SplitSpec {
            n_users_a: 6,
            n_users_b: 4,
            samples_per_user_a: 50,
            samples_per_user_b: 30,
            min_class_frac: 0.0,
            seed,
            ..SplitSpec::default()
        }
    }

    #[test]
    fn parts_are_user_disjoint() {
        for seed in 0..5 {
            let c = generate(&GeneratorSpec::default(), &small_split(seed)).unwrap();
            let a: BTreeSet<_> = c.a.train.users();
            let b: BTreeSet<_> = c.b.train.users();
            assert!(a.is_disjoint(&b));
            assert_eq!(a.len(), 6);
            assert_eq!(b.len(), 4);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&GeneratorSpec::default(), &small_split(3)).unwrap();
        let b = generate(&GeneratorSpec::default(), &small_split(3)).unwrap();
        assert_eq!(a, b);
        let c = generate(&GeneratorSpec::default(), &small_split(4)).unwrap();
        assert_ne!(a.a.train, c.a.train);
    }

    #[test]
    fn labels_follow_rule() {
        let c = generate(&GeneratorSpec::default(), &small_split(1)).unwrap();
        assert!(c.labels_follow_rule());
    }

    #[test]
    fn default_corpus_is_balanced() {
        let c = generate(&GeneratorSpec::default(), &SplitSpec::default()).unwrap();
        assert!(c.is_balanced(0.05));
        assert_eq!(c.a.train.len(), 50 * 120);
        assert_eq!(c.b.test.len(), 20 * 12);
    }

    #[test]
    fn unbiased_corpus_is_also_balanced() {
        let gen = GeneratorSpec {
            bias_levels: vec![0.0],
            ..GeneratorSpec::default()
        };
        let c = generate(&gen, &SplitSpec::default()).unwrap();
        assert!(c.is_balanced(0.05));
    }

    #[test]
    fn quantizer_config_errors() {
        let gen = GeneratorSpec {
            n_classes: 1,
            ..GeneratorSpec::default()
        };
        assert!(matches!(generate(&gen, &small_split(0)), Err(Error::Config(_))));
    }

    #[test]
    fn quantizer_bins() {
        let g = GeneratorSpec::default();
        assert_eq!(g.quantize(0.0), 2);
        assert_eq!(g.quantize(-0.51), 1);
        assert_eq!(g.quantize(0.5), 3);
        assert_eq!(g.quantize(-100.0), 0);
        assert_eq!(g.quantize(100.0), 4);
    }

    #[test]
    fn strong_bias_separates_ceilings() {
        let c = generate(&GeneratorSpec::default(), &SplitSpec::default()).unwrap();
        let (generic, personal) = c.bayes_ceilings(&c.a.test);
        assert_eq!(personal, 1.0);
        assert!(personal - generic >= 0.15, "generic ceiling {generic}");
    }

    #[test]
    fn unbiased_text_rule_is_learnable_from_polarity_mean() {
        // A probe that sees only the mean token polarity recovers every label
        // once it learns the bin edges; fit the edges from training data.
        let gen = GeneratorSpec {
            bias_levels: vec![0.0],
            ..GeneratorSpec::default()
        };
        let c = generate(&gen, &small_split(2)).unwrap();
        let feature = |s: &Sample| {
            s.tokens.iter().map(|&t| gen.polarity(t)).sum::<f64>() / s.tokens.len() as f64
        };
        // per-class feature ranges from train; thresholds at midpoints
        let mut lo = vec![f64::INFINITY; gen.n_classes];
        let mut hi = vec![f64::NEG_INFINITY; gen.n_classes];
        for s in &c.a.train.samples {
            let f = feature(s);
            lo[s.label] = lo[s.label].min(f);
            hi[s.label] = hi[s.label].max(f);
        }
        let edges: Vec<f64> = (0..gen.n_classes - 1)
            .map(|k| (hi[k] + lo[k + 1]) / 2.0)
            .collect();
        let predict = |f: f64| edges.iter().filter(|&&e| f >= e).count();
        let test = &c.a.test;
        let correct = test
            .samples
            .iter()
            .filter(|s| predict(feature(s)) == s.label)
            .count();
        assert!(correct as f64 / test.len() as f64 > 0.97);
    }

    #[test]
    fn dataset_round_trip() {
        let c = generate(&GeneratorSpec::default(), &small_split(5)).unwrap();
        let text = c.a.dev.to_text();
        assert_eq!(Dataset::from_text(&text).unwrap(), c.a.dev);
    }

    #[test]
    fn utf8_users_survive() {
        let d = Dataset::new(vec![Sample {
            tokens: vec![1, 2],
            label: 3,
            user: UserId::new("użytkownik-日本").unwrap(),
        }]);
        assert_eq!(Dataset::from_text(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn missing_label_is_a_parse_error_at_its_line() {
        let text = "u1\t2\t1 2 3\nu2\t4 5 6\n";
        assert!(matches!(
            Dataset::from_text(text),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            Dataset::from_text("u1\tx\t1\n"),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn few_shot_views() {
        let c = generate(&GeneratorSpec::default(), &small_split(6)).unwrap();
        let train = &c.b.train;
        assert!(few_shot_view(train, 0).unwrap().is_empty());
        assert_eq!(&few_shot_view(train, 18).unwrap(), train);
        let view = few_shot_view(train, 15).unwrap();
        for u in train.users() {
            assert_eq!(view.for_user(&u).len(), 15);
        }
        // first k in stored order
        let u = train.users().into_iter().next().unwrap();
        let first: Vec<_> = train.for_user(&u).samples.into_iter().take(15).collect();
        assert_eq!(view.for_user(&u).samples, first);
        assert!(matches!(few_shot_view(train, 19), Err(Error::Data(_))));
    }

    #[test]
    fn corpus_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate(&GeneratorSpec::default(), &small_split(7)).unwrap();
        c.save(dir.path()).unwrap();
        assert_eq!(Corpus::load(dir.path()).unwrap(), c);
    }
}
