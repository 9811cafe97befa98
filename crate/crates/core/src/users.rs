//! User embeddings `p = f(u)`, personalized dropout, and the user-table file.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::{Rng, Vector};

/// Opaque non-empty user token.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UserId(String);

impl UserId {
    pub fn new(token: impl Into<String>) -> Result<Self> {
        let token = token.into();
        if token.is_empty() {
            return Err(Error::Input("user token must be non-empty".into()));
        }
        if token.contains(['\t', '\n', '\r']) {
            return Err(Error::Input(format!(
                "user token {token:?} contains a tab or newline"
            )));
        }
        Ok(Self(token))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserEntry {
    pub embedding: Vector,
    pub trainable: bool,
}

/// Map from user to embedding. New users start at the zero vector, which
/// makes the person path of every PLoRA layer vanish for them.
#[derive(Clone, Debug, PartialEq)]
pub struct UserRegistry {
    d_p: usize,
    entries: BTreeMap<UserId, UserEntry>,
}

impl UserRegistry {
    pub fn new(d_p: usize) -> Self {
        Self {
            d_p,
            entries: BTreeMap::new(),
        }
    }

    pub fn d_p(&self) -> usize {
        self.d_p
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, user: &UserId) -> bool {
        self.entries.contains_key(user)
    }

    /// Existing embedding, or a freshly registered trainable zero vector.
    pub fn lookup_or_register(&mut self, user: &UserId) -> &Vector {
        let d_p = self.d_p;
        &self
            .entries
            .entry(user.clone())
            .or_insert_with(|| UserEntry {
                embedding: Vector::zeros(d_p),
                trainable: true,
            })
            .embedding
    }

    pub fn get(&self, user: &UserId) -> Option<&Vector> {
        self.entries.get(user).map(|e| &e.embedding)
    }

    pub fn require(&self, user: &UserId) -> Result<&Vector> {
        self.get(user)
            .ok_or_else(|| Error::UnknownUser(user.to_string()))
    }

    pub fn get_mut(&mut self, user: &UserId) -> Option<&mut Vector> {
        self.entries.get_mut(user).map(|e| &mut e.embedding)
    }

    pub fn entry(&self, user: &UserId) -> Option<&UserEntry> {
        self.entries.get(user)
    }

    pub fn set_trainable(&mut self, user: &UserId, trainable: bool) -> Result<()> {
        self.entries
            .get_mut(user)
            .map(|e| e.trainable = trainable)
            .ok_or_else(|| Error::UnknownUser(user.to_string()))
    }

    pub fn freeze_all(&mut self) {
        self.entries.values_mut().for_each(|e| e.trainable = false);
    }

    pub fn insert(&mut self, user: UserId, embedding: Vector, trainable: bool) -> Result<()> {
        if embedding.len() != self.d_p {
            return Err(Error::dim(
                "user embedding",
                (1, embedding.len()),
                (1, self.d_p),
            ));
        }
        self.entries.insert(
            user,
            UserEntry {
                embedding,
                trainable,
            },
        );
        Ok(())
    }

    /// Users in sorted order.
    pub fn iter(&self) -> impl Iterator<Item = (&UserId, &UserEntry)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&UserId, &mut UserEntry)> {
        self.entries.iter_mut()
    }

    pub fn trainable_users(&self) -> Vec<UserId> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(u, _)| u.clone())
            .collect()
    }

    /// `d_p` per registered user.
    pub fn parameter_count(&self) -> usize {
        self.entries.len() * self.d_p
    }

    /// Writes one `user<TAB>trainable<TAB>v1 v2 ...` line per user.
    /// Values use shortest round-trip formatting, so reloading is bit-exact.
    pub fn save_table(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_table())?;
        Ok(())
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (user, entry) in &self.entries {
            let values: Vec<String> = entry
                .embedding
                .as_slice()
                .iter()
                .map(|v| format!("{v:?}"))
                .collect();
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                user,
                u8::from(entry.trainable),
                values.join(" ")
            ));
        }
        out
    }

    pub fn load_table(path: &Path, d_p: usize) -> Result<Self> {
        Self::from_table(&fs::read_to_string(path)?, d_p)
    }

    pub fn from_table(text: &str, d_p: usize) -> Result<Self> {
        let mut reg = UserRegistry::new(d_p);
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: &str| Error::Parse {
                line: line_no,
                msg: msg.to_string(),
            };
            let mut fields = line.split('\t');
            let user = fields.next().ok_or_else(|| parse_err("missing user"))?;
            let flag = fields
                .next()
                .ok_or_else(|| parse_err("missing trainable flag"))?;
            let values = fields.next().ok_or_else(|| parse_err("missing values"))?;
            if fields.next().is_some() {
                return Err(parse_err("too many fields"));
            }
            let trainable = match flag {
                "0" => false,
                "1" => true,
                _ => return Err(parse_err("trainable flag must be 0 or 1")),
            };
            let data = values
                .split(' ')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| parse_err(&e.to_string()))?;
            if data.len() != d_p {
                return Err(parse_err(&format!(
                    "expected {d_p} values, found {}",
                    data.len()
                )));
            }
            let user = UserId::new(user).map_err(|e| parse_err(&e.to_string()))?;
            let embedding = Vector::from_vec(data).map_err(|e| parse_err(&e.to_string()))?;
            reg.insert(user, embedding, trainable)?;
        }
        Ok(reg)
    }
}

/// The all-zero embedding used for anonymous users and zero-shot evaluation.
pub fn anonymous(d_p: usize) -> Vector {
    Vector::zeros(d_p)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PDropoutConfig {
    pub omega: f64,
    pub seed: u64,
}

impl PDropoutConfig {
    pub fn new(omega: f64, seed: u64) -> Result<Self> {
        let cfg = Self { omega, seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::Parameter(format!(
                "dropout ratio must lie in [0, 1], got {}",
                self.omega
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    Keep,
    /// The sample runs with `p = 0`.
    Masked,
}

/// Independent Bernoulli(omega) mask per sample.
pub fn pdropout_mask(users: &[UserId], cfg: &PDropoutConfig, rng: &mut Rng) -> Result<Vec<Mask>> {
    cfg.validate()?;
    Ok(users
        .iter()
        .map(|_| {
            if rng.bernoulli(cfg.omega) {
                Mask::Masked
            } else {
                Mask::Keep
            }
        })
        .collect())
}
