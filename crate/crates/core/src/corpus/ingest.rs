use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{Catalog, CategoryId, Dataset, IdMap, Interaction, Origin, Trajectory};
use crate::error::{Error, Result};

/// Reads `user,item,rating,timestamp` and `item,categories` CSV files.
///
/// Users and items are densely re-indexed in ascending external-id order and
/// the maps are kept on the dataset. Line numbers in errors count data rows,
/// starting at 1 after the header.
pub fn ingest_csv(
    interactions_path: &Path,
    categories_path: &Path,
    scale: (f64, f64),
) -> Result<Dataset> {
    let inter = File::open(interactions_path).map_err(|e| Error::io(interactions_path, e))?;
    let cats = File::open(categories_path).map_err(|e| Error::io(categories_path, e))?;
    ingest_readers(inter, cats, scale)
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(r)
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<T> {
    let raw = rec.get(idx).ok_or_else(|| Error::Parse {
        line,
        message: format!("missing field `{name}`"),
    })?;
    raw.parse().map_err(|_| Error::Parse {
        line,
        message: format!("cannot parse `{name}` from {raw:?}"),
    })
}

fn check_header(r: &mut csv::Reader<impl Read>, expected: &[&str]) -> Result<()> {
    let header = r.headers().map_err(|e| Error::Parse {
        line: 0,
        message: e.to_string(),
    })?;
    let got: Vec<&str> = header.iter().collect();
    if got != expected {
        return Err(Error::Parse {
            line: 0,
            message: format!("expected header {expected:?}, found {got:?}"),
        });
    }
    Ok(())
}

pub fn ingest_readers(
    interactions: impl Read,
    categories: impl Read,
    scale: (f64, f64),
) -> Result<Dataset> {
    let (r_min, r_max) = scale;
    if !(r_min < r_max) {
        return Err(Error::validation(format!(
            "rating scale ({r_min}, {r_max}) requires r_min < r_max"
        )));
    }

    let mut cat_reader = reader(categories);
    check_header(&mut cat_reader, &["item", "categories"])?;
    let mut raw_cats: BTreeMap<u64, Vec<CategoryId>> = BTreeMap::new();
    for (i, rec) in cat_reader.records().enumerate() {
        let line = i as u64 + 1;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if rec.len() != 2 {
            return Err(Error::Parse {
                line,
                message: format!("expected 2 fields, found {}", rec.len()),
            });
        }
        let item: u64 = field(&rec, 0, "item", line)?;
        let cats: Vec<CategoryId> = rec[1]
            .split('|')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("cannot parse category from {s:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if cats.is_empty() {
            return Err(Error::Validation {
                line: Some(line),
                message: format!("item {item} has no category"),
            });
        }
        if raw_cats.insert(item, cats).is_some() {
            return Err(Error::Validation {
                line: Some(line),
                message: format!("item {item} listed twice"),
            });
        }
    }
    let item_ids = IdMap::from_sorted(raw_cats.keys().copied().collect());
    let num_categories = raw_cats
        .values()
        .flatten()
        .map(|&c| c as usize + 1)
        .max()
        .unwrap_or(0);
    let catalog = Catalog::new(num_categories, raw_cats.into_values().collect())?;

    let mut inter_reader = reader(interactions);
    check_header(&mut inter_reader, &["user", "item", "rating", "timestamp"])?;
    let mut rows: Vec<(u64, usize, f64, i64)> = Vec::new();
    for (i, rec) in inter_reader.records().enumerate() {
        let line = i as u64 + 1;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if rec.len() != 4 {
            return Err(Error::Parse {
                line,
                message: format!("expected 4 fields, found {}", rec.len()),
            });
        }
        let user: u64 = field(&rec, 0, "user", line)?;
        let item: u64 = field(&rec, 1, "item", line)?;
        let rating: f64 = field(&rec, 2, "rating", line)?;
        let timestamp: i64 = field(&rec, 3, "timestamp", line)?;
        if !(r_min..=r_max).contains(&rating) {
            return Err(Error::Validation {
                line: Some(line),
                message: format!("rating {rating} outside scale [{r_min}, {r_max}]"),
            });
        }
        let item = item_ids.to_internal(item).ok_or_else(|| Error::Validation {
            line: Some(line),
            message: format!("item {item} has no category"),
        })?;
        rows.push((user, item, rating, timestamp));
    }

    let users: BTreeSet<u64> = rows.iter().map(|r| r.0).collect();
    let user_ids = IdMap::from_sorted(users.into_iter().collect());
    let mut per_user: Vec<Vec<Interaction>> = vec![Vec::new(); user_ids.len()];
    for (user, item, rating, timestamp) in rows {
        let u = user_ids.to_internal(user).expect("user collected above");
        per_user[u].push(Interaction {
            user: u,
            item,
            rating,
            timestamp,
        });
    }
    let mut trajectories = Vec::with_capacity(per_user.len());
    for (u, mut steps) in per_user.into_iter().enumerate() {
        steps.sort_by_key(|s| s.timestamp);
        if let Some(w) = steps.windows(2).find(|w| w[0].timestamp == w[1].timestamp) {
            return Err(Error::validation(format!(
                "user {} has two interactions at timestamp {}",
                user_ids.to_external(u).unwrap(),
                w[0].timestamp
            )));
        }
        trajectories.push(Trajectory::new(u, steps, Origin::Logged)?);
    }

    let num_users = user_ids.len();
    let ds = Dataset {
        catalog,
        trajectories,
        r_min,
        r_max,
        num_users,
        user_ids,
        item_ids,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes the logged part of `dataset` in the two CSV formats read by
/// [`ingest_csv`], using external ids.
pub fn write_csv(dataset: &Dataset, interactions_path: &Path, categories_path: &Path) -> Result<()> {
    let inter = File::create(interactions_path).map_err(|e| Error::io(interactions_path, e))?;
    let cats = File::create(categories_path).map_err(|e| Error::io(categories_path, e))?;
    write_csv_writers(dataset, inter, cats).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(interactions_path, source),
        other => other,
    })
}

pub fn write_csv_writers(dataset: &Dataset, mut interactions: impl Write, mut categories: impl Write) -> Result<()> {
    let io = |e| Error::io("<csv writer>", e);
    let mut out = String::from("user,item,rating,timestamp\n");
    let mut logged: Vec<&Trajectory> = dataset.logged().collect();
    logged.sort_by_key(|t| t.user);
    for t in logged {
        for s in &t.steps {
            out.push_str(&format!(
                "{},{},{},{}\n",
                dataset.user_ids.to_external(s.user).unwrap_or(s.user as u64),
                dataset.item_ids.to_external(s.item).unwrap_or(s.item as u64),
                s.rating,
                s.timestamp
            ));
        }
    }
    interactions.write_all(out.as_bytes()).map_err(io)?;

    let mut out = String::from("item,categories\n");
    for (i, cats) in dataset.catalog.all_categories().iter().enumerate() {
        let joined: Vec<String> = cats.iter().map(|c| c.to_string()).collect();
        out.push_str(&format!(
            "{},{}\n",
            dataset.item_ids.to_external(i).unwrap_or(i as u64),
            joined.join("|")
        ));
    }
    categories.write_all(out.as_bytes()).map_err(io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const CATS: &str = "item,categories\n10,1|2\n20,3\n30,1\n40,2|3\n";

    fn ingest(inter: &str) -> Result<Dataset> {
        ingest_readers(inter.as_bytes(), CATS.as_bytes(), (1.0, 5.0))
    }

    #[test]
    fn groups_and_reindexes() {
        let ds = ingest(
            "user,item,rating,timestamp\n7,10,4,1\n9,20,3,1\n7,30,2,2\n9,40,5,2\n7,20,1,3\n9,10,2,3\n",
        )
        .unwrap();
        assert_eq!(ds.num_users, 2);
        assert_eq!(ds.trajectories.len(), 2);
        assert!(ds.trajectories.iter().all(|t| t.len() == 3));
        assert_eq!(ds.trajectories[0].items(), vec![0, 2, 1]);
        assert_eq!(ds.user_ids.to_external(0), Some(7));
        assert_eq!(ds.user_ids.to_external(1), Some(9));
        assert_eq!(ds.item_ids.to_internal(40), Some(3));
        assert_eq!(ds.catalog.num_categories(), 4);
    }

    #[test]
    fn sorts_shuffled_timestamps() {
        let ds = ingest("user,item,rating,timestamp\n1,10,4,30\n1,20,3,10\n1,30,2,20\n").unwrap();
        let ts: Vec<i64> = ds.trajectories[0].steps.iter().map(|s| s.timestamp).collect();
        assert_eq!(ts, vec![10, 20, 30]);
        assert_eq!(ds.trajectories[0].items(), vec![1, 2, 0]);
    }

    #[test]
    fn out_of_scale_rating_names_line() {
        let err = ingest_readers(
            "user,item,rating,timestamp\n5,7,9.0,100\n".as_bytes(),
            "item,categories\n7,1\n".as_bytes(),
            (1.0, 5.0),
        )
        .unwrap_err();
        match err {
            Error::Validation { line, .. } => assert_eq!(line, Some(1)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(err_string("user,item,rating,timestamp\n5,7,9.0,100\n").contains("line 1"));
    }

    fn err_string(inter: &str) -> String {
        ingest_readers(inter.as_bytes(), "item,categories\n7,1\n".as_bytes(), (1.0, 5.0))
            .unwrap_err()
            .to_string()
    }

    #[test]
    fn malformed_row_is_parse_error_with_line() {
        let err = ingest("user,item,rating,timestamp\n1,10,4,1\n1,abc,3,2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err:?}");
        let err = ingest("user,item,rating,timestamp\n1,10,4\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err:?}");
    }

    #[test]
    fn item_without_category_rejected() {
        let err = ingest("user,item,rating,timestamp\n1,99,4,1\n").unwrap_err();
        assert!(matches!(err, Error::Validation { line: Some(1), .. }));
        let err = ingest_readers(
            "user,item,rating,timestamp\n".as_bytes(),
            "item,categories\n7,\n".as_bytes(),
            (1.0, 5.0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation { line: Some(1), .. }), "{err:?}");
    }

    #[test]
    fn timestamp_ties_rejected() {
        let err = ingest("user,item,rating,timestamp\n1,10,4,5\n1,20,3,5\n").unwrap_err();
        assert!(matches!(err, Error::Validation { .. }));
    }

    #[test]
    fn user_items_and_external_lookup() {
        let ds = ingest("user,item,rating,timestamp\n3,40,4.0,1\n3,20,2.0,2\n").unwrap();
        assert_eq!(ds.user_items(0).unwrap(), vec![(3, 4.0), (1, 2.0)]);
        assert_eq!(ds.user_items_external(3).unwrap(), vec![(3, 4.0), (1, 2.0)]);
        assert!(matches!(ds.user_items(1), Err(Error::Lookup(_))));
        assert!(matches!(ds.user_items_external(4), Err(Error::Lookup(_))));
    }
}
