use crate::encodings::Timestamp;
use crate::error::{Error, Result};

pub const DEFAULT_TOLERANCE_S: i64 = 600;

fn check_sorted<T>(xs: &[(Timestamp, T)], what: &'static str) -> Result<()> {
    if xs.windows(2).any(|w| w[1].0 < w[0].0) {
        return Err(Error::Unsorted(what));
    }
    Ok(())
}

/// Pairs each image with its nearest label within `tolerance_s` seconds.
///
/// Unmatched images are dropped; a label may serve several images; equal
/// distances on both sides resolve to the earlier label.
pub fn collocate_labels<I: Clone, L: Clone>(
    images: &[(Timestamp, I)],
    labels: &[(Timestamp, L)],
    tolerance_s: i64,
) -> Result<Vec<(I, L)>> {
    check_sorted(images, "images")?;
    check_sorted(labels, "labels")?;
    let mut out = Vec::new();
    for (t, img) in images {
        let e = t.epoch_seconds();
        let i = labels.partition_point(|(lt, _)| lt.epoch_seconds() < e);
        // Nearest earlier candidate is the last of a run of equal timestamps
        // before `i`; the nearest later one is the first at or after `i`.
        let before = i.checked_sub(1).map(|j| (e - labels[j].0.epoch_seconds(), j));
        let after = labels.get(i).map(|(lt, _)| (lt.epoch_seconds() - e, i));
        let best = match (before, after) {
            (Some(b), Some(a)) => Some(if a.0 < b.0 { a } else { b }),
            (b, a) => b.or(a),
        };
        if let Some((dt, j)) = best {
            if dt <= tolerance_s {
                out.push((img.clone(), labels[j].1.clone()));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(s: i64) -> Timestamp {
        Timestamp::from_epoch(1_600_000_000 + s).unwrap()
    }

    #[test]
    fn tolerance_boundary() {
        let imgs = [(ts(0), "a")];
        assert_eq!(collocate_labels(&imgs, &[(ts(599), 1)], 600).unwrap(), vec![("a", 1)]);
        assert_eq!(collocate_labels(&imgs, &[(ts(600), 1)], 600).unwrap(), vec![("a", 1)]);
        assert!(collocate_labels(&imgs, &[(ts(601), 1)], 600).unwrap().is_empty());
    }

    #[test]
    fn ties_go_to_the_earlier_label() {
        let imgs = [(ts(0), "a")];
        let labels = [(ts(-300), "early"), (ts(300), "late")];
        assert_eq!(collocate_labels(&imgs, &labels, 600).unwrap(), vec![("a", "early")]);
        let closer_late = [(ts(-301), "early"), (ts(300), "late")];
        assert_eq!(collocate_labels(&imgs, &closer_late, 600).unwrap(), vec![("a", "late")]);
    }

    #[test]
    fn shared_labels_and_unsorted_input() {
        let imgs = [(ts(0), 0), (ts(60), 1), (ts(5000), 2)];
        let labels = [(ts(30), 'x')];
        assert_eq!(collocate_labels(&imgs, &labels, 600).unwrap(), vec![(0, 'x'), (1, 'x')]);
        let unsorted = [(ts(60), 0), (ts(0), 1)];
        assert!(matches!(collocate_labels(&unsorted, &labels, 600), Err(Error::Unsorted(_))));
    }
}
