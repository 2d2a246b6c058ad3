use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{ItemId, UserId};
use crate::error::{Error, Result};

/// Fully observed user × item rating matrix, every entry in `[r_min, r_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingOracle {
    num_users: usize,
    num_items: usize,
    r_min: f64,
    r_max: f64,
    ratings: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleFormat {
    /// `user,item,rating` rows.
    Long,
    /// One CSV row per user, one column per item.
    Dense,
}

impl RatingOracle {
    /// Builds an oracle, clipping every entry into the scale.
    pub fn from_dense(
        num_users: usize,
        num_items: usize,
        scale: (f64, f64),
        mut ratings: Vec<f64>,
    ) -> Result<Self> {
        if ratings.len() != num_users * num_items {
            return Err(Error::Shape {
                op: "rating_oracle",
                left: vec![num_users, num_items],
                right: vec![ratings.len()],
            });
        }
        if let Some(v) = ratings.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite rating {v}")));
        }
        for v in &mut ratings {
            *v = v.clamp(scale.0, scale.1);
        }
        Ok(RatingOracle {
            num_users,
            num_items,
            r_min: scale.0,
            r_max: scale.1,
            ratings,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn scale(&self) -> (f64, f64) {
        (self.r_min, self.r_max)
    }

    pub fn rating(&self, user: UserId, item: ItemId) -> Result<f64> {
        if user >= self.num_users || item >= self.num_items {
            return Err(Error::Lookup(format!(
                "({user}, {item}) outside oracle of shape {}x{}",
                self.num_users, self.num_items
            )));
        }
        Ok(self.ratings[user * self.num_items + item])
    }

    pub fn row(&self, user: UserId) -> &[f64] {
        &self.ratings[user * self.num_items..(user + 1) * self.num_items]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.ratings
    }

    pub fn write(&self, mut w: impl Write, format: OracleFormat) -> std::io::Result<()> {
        let mut out = String::new();
        match format {
            OracleFormat::Long => {
                out.push_str("user,item,rating\n");
                for u in 0..self.num_users {
                    for (i, r) in self.row(u).iter().enumerate() {
                        out.push_str(&format!("{u},{i},{r}\n"));
                    }
                }
            }
            OracleFormat::Dense => {
                for u in 0..self.num_users {
                    let row: Vec<String> = self.row(u).iter().map(|r| r.to_string()).collect();
                    out.push_str(&row.join(","));
                    out.push('\n');
                }
            }
        }
        w.write_all(out.as_bytes())
    }

    /// Reads either export format; the long format is recognized by its header.
    pub fn read(r: impl BufRead, scale: (f64, f64)) -> Result<Self> {
        let lines: Vec<String> = r
            .lines()
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io("<oracle>", e))?;
        let parse = |s: &str, line: usize| -> Result<f64> {
            s.trim().parse().map_err(|_| Error::Parse {
                line: line as u64,
                message: format!("cannot parse rating from {s:?}"),
            })
        };
        if lines.first().map(|l| l.trim()) == Some("user,item,rating") {
            let mut entries = Vec::new();
            let (mut nu, mut ni) = (0, 0);
            for (i, l) in lines.iter().enumerate().skip(1) {
                if l.trim().is_empty() {
                    continue;
                }
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 3 {
                    return Err(Error::Parse {
                        line: i as u64,
                        message: "expected user,item,rating".into(),
                    });
                }
                let idx = |s: &str| -> Result<usize> {
                    s.trim().parse().map_err(|_| Error::Parse {
                        line: i as u64,
                        message: format!("cannot parse id from {s:?}"),
                    })
                };
                let (u, it) = (idx(f[0])?, idx(f[1])?);
                nu = nu.max(u + 1);
                ni = ni.max(it + 1);
                entries.push((u, it, parse(f[2], i)?));
            }
            if entries.len() != nu * ni {
                return Err(Error::Format(format!(
                    "long oracle has {} entries, expected {}x{}",
                    entries.len(),
                    nu,
                    ni
                )));
            }
            let mut ratings = vec![f64::NAN; nu * ni];
            for (u, i, r) in entries {
                ratings[u * ni + i] = r;
            }
            Self::from_dense(nu, ni, scale, ratings)
        } else {
            let mut ratings = Vec::new();
            let mut width = None;
            let mut rows = 0;
            for (i, l) in lines.iter().enumerate() {
                if l.trim().is_empty() {
                    continue;
                }
                let row: Vec<f64> = l
                    .split(',')
                    .map(|s| parse(s, i + 1))
                    .collect::<Result<_>>()?;
                if *width.get_or_insert(row.len()) != row.len() {
                    return Err(Error::Parse {
                        line: i as u64 + 1,
                        message: "ragged dense oracle row".into(),
                    });
                }
                ratings.extend(row);
                rows += 1;
            }
            Self::from_dense(rows, width.unwrap_or(0), scale, ratings)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clips_into_scale() {
        let o = RatingOracle::from_dense(1, 3, (1.0, 5.0), vec![0.0, 3.0, 9.0]).unwrap();
        assert_eq!(o.row(0), &[1.0, 3.0, 5.0]);
    }

    #[test]
    fn both_formats_round_trip() {
        let o = RatingOracle::from_dense(2, 3, (1.0, 5.0), vec![1.5, 2.25, 3.0, 4.125, 5.0, 1.0 / 3.0 + 1.0]).unwrap();
        for fmt in [OracleFormat::Long, OracleFormat::Dense] {
            let mut buf = Vec::new();
            o.write(&mut buf, fmt).unwrap();
            let back = RatingOracle::read(buf.as_slice(), (1.0, 5.0)).unwrap();
            assert_eq!(back, o);
        }
    }

    #[test]
    fn out_of_range_lookup() {
        let o = RatingOracle::from_dense(1, 1, (1.0, 5.0), vec![2.0]).unwrap();
        assert!(matches!(o.rating(0, 1), Err(Error::Lookup(_))));
        assert!(matches!(o.rating(1, 0), Err(Error::Lookup(_))));
    }
}
