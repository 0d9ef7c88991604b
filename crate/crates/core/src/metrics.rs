//! Binarization, per-class IoU and the three dataset-level scores.
//!
//! Conventions: Challenge IoU averages, per image, the IoU of the classes
//! present in that image's ground truth. IoU also includes classes that are
//! only predicted (scoring 0). mc IoU pools intersections and unions per
//! class over the dataset. Images with no class to average are skipped.

use std::fmt;

use gradkit::{Scalar, Tensor};
use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::crossmodal::dims_error;
use crate::error::{Error, Result};
use crate::scenegen::Mask;

/// Pixels whose logit is strictly above `threshold`. `logits` is `H x W`.
pub fn binarize<T: Scalar>(logits: &Tensor<T>, threshold: T) -> Result<Mask> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(dims_error("binarize", s, &[]));
    }
    Mask::from_vec(s[0], s[1], logits.data().iter().map(|&v| v > threshold).collect())
}

/// `|pred & gt| / |pred | gt|`; `None` when both masks are empty.
pub fn class_iou(pred: &Mask, gt: &Mask) -> Result<Option<f64>> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(dims_error("class_iou", &[pred.height(), pred.width()], &[gt.height(), gt.width()]));
    }
    let union = pred.union(gt);
    Ok((union > 0).then(|| pred.intersection(gt) as f64 / union as f64))
}

/// Pixel counts of one class in one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassCounts {
    pub gt_present: bool,
    pub predicted: bool,
    pub intersection: usize,
    pub union: usize,
}

impl ClassCounts {
    pub fn new(pred: &Mask, gt: &Mask) -> Result<Self> {
        class_iou(pred, gt)?;
        Ok(Self {
            gt_present: !gt.is_empty(),
            predicted: !pred.is_empty(),
            intersection: pred.intersection(gt),
            union: pred.union(gt),
        })
    }

    fn iou(&self) -> f64 {
        if self.union == 0 {
            0.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub challenge_iou: f64,
    pub iou: f64,
    pub mc_iou: f64,
    /// Pooled per-class IoU in category order; `None` if the class never
    /// occurs or is never predicted.
    #[serde(with = "named")]
    pub per_class: Vec<(String, Option<f64>)>,
    /// Number of images whose ground truth contains each class.
    #[serde(with = "named")]
    pub counts: Vec<(String, usize)>,
    pub n_images: usize,
}

/// Scores a table of counts: one row per image, one entry per class.
pub fn score(class_names: &[String], images: &[Vec<ClassCounts>]) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty dataset".into()));
    }
    let c = class_names.len();
    if let Some(row) = images.iter().find(|r| r.len() != c) {
        return Err(dims_error("score", &[c], &[row.len()]));
    }
    let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);

    let mut challenge = Vec::new();
    let mut all = Vec::new();
    for row in images {
        let present: Vec<f64> = row.iter().filter(|k| k.gt_present).map(ClassCounts::iou).collect();
        let any: Vec<f64> = row.iter().filter(|k| k.gt_present || k.predicted).map(ClassCounts::iou).collect();
        challenge.extend(mean(&present));
        all.extend(mean(&any));
    }

    let mut per_class = Vec::with_capacity(c);
    let mut counts = Vec::with_capacity(c);
    for (ci, name) in class_names.iter().enumerate() {
        let (mut inter, mut union, mut seen) = (0usize, 0usize, 0usize);
        for row in images {
            let k = row[ci];
            if k.gt_present || k.predicted {
                inter += k.intersection;
                union += k.union;
            }
            seen += k.gt_present as usize;
        }
        per_class.push((name.clone(), (union > 0).then(|| inter as f64 / union as f64)));
        counts.push((name.clone(), seen));
    }
    let defined: Vec<f64> = per_class.iter().filter_map(|(_, v)| *v).collect();

    Ok(EvalReport {
        challenge_iou: mean(&challenge).unwrap_or(0.0),
        iou: mean(&all).unwrap_or(0.0),
        mc_iou: mean(&defined).unwrap_or(0.0),
        per_class,
        counts,
        n_images: images.len(),
    })
}

/// Serializes `(name, value)` pairs as a JSON object in their given order.
mod named {
    use super::*;
    use std::marker::PhantomData;

    pub fn serialize<S: Serializer, V: Serialize>(pairs: &[(String, V)], s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(pairs.len()))?;
        for (k, v) in pairs {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }

    struct PairVisitor<V>(PhantomData<V>);

    impl<'de, V: Deserialize<'de>> Visitor<'de> for PairVisitor<V> {
        type Value = Vec<(String, V)>;

        fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            f.write_str("an object keyed by class name")
        }

        fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Self::Value, A::Error> {
            let mut out = Vec::new();
            while let Some(entry) = access.next_entry()? {
                out.push(entry);
            }
            Ok(out)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>, V: Deserialize<'de>>(d: D) -> Result<Vec<(String, V)>, D::Error> {
        d.deserialize_map(PairVisitor(PhantomData))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Mask {
        Mask::from_vec(h, w, (0..h * w).map(|i| f(i / w, i % w)).collect()).unwrap()
    }

    #[test]
    fn binarize_is_strict() {
        let t = Tensor::<f64>::from_f64(vec![2, 2], &[-1.0, 0.0, 0.5, 0.25]).unwrap();
        assert_eq!(binarize(&t, 0.0).unwrap().data(), &[false, false, true, true]);
        assert_eq!(binarize(&t, 0.25).unwrap().data(), &[false, false, true, false]);
        assert!(binarize(&Tensor::<f64>::full(vec![3, 3], -1.0), 0.0).unwrap().is_empty());
    }

    #[test]
    fn iou_hand_cases() {
        let top = mask(8, 8, |y, _| y < 4);
        let left = mask(8, 8, |_, x| x < 4);
        assert!((class_iou(&top, &left).unwrap().unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(class_iou(&top, &top).unwrap(), Some(1.0));
        let bottom = mask(8, 8, |y, _| y >= 4);
        assert_eq!(class_iou(&top, &bottom).unwrap(), Some(0.0));
        assert_eq!(class_iou(&Mask::empty(8, 8), &Mask::empty(8, 8)).unwrap(), None);
        assert!(class_iou(&Mask::empty(8, 8), &Mask::empty(4, 8)).is_err());
    }

    #[test]
    fn perfect_and_empty_predictors() {
        let names: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let gt = [mask(4, 4, |y, _| y < 2), mask(4, 4, |_, x| x == 3)];
        let perfect = vec![vec![
            ClassCounts::new(&gt[0], &gt[0]).unwrap(),
            ClassCounts::new(&gt[1], &gt[1]).unwrap(),
        ]];
        let r = score(&names, &perfect).unwrap();
        assert_eq!((r.challenge_iou, r.iou, r.mc_iou), (1.0, 1.0, 1.0));
        let empty = Mask::empty(4, 4);
        let none = vec![vec![
            ClassCounts::new(&empty, &gt[0]).unwrap(),
            ClassCounts::new(&empty, &gt[1]).unwrap(),
        ]];
        assert_eq!(score(&names, &none).unwrap().challenge_iou, 0.0);
        assert!(score(&names, &[]).is_err());
    }

    #[test]
    fn absent_but_predicted_lowers_iou_only() {
        let names: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let gt = mask(4, 4, |y, _| y < 2);
        let row = vec![
            ClassCounts::new(&gt, &gt).unwrap(),
            ClassCounts::new(&mask(4, 4, |y, x| y == 3 && x == 3), &Mask::empty(4, 4)).unwrap(),
        ];
        let r = score(&names, &[row]).unwrap();
        assert_eq!(r.challenge_iou, 1.0);
        assert_eq!(r.iou, 0.5);
        assert_eq!(r.per_class[1].1, Some(0.0));
        assert_eq!(r.counts, vec![("a".to_string(), 1), ("b".to_string(), 0)]);
    }

    #[test]
    fn report_json_keeps_class_order() {
        let r = EvalReport {
            challenge_iou: 0.5,
            iou: 0.25,
            mc_iou: 0.75,
            per_class: vec![("zeta".into(), Some(0.5)), ("alpha".into(), None)],
            counts: vec![("zeta".into(), 3), ("alpha".into(), 0)],
            n_images: 4,
        };
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.find("zeta").unwrap() < json.find("alpha").unwrap());
        assert!(json.contains("\"alpha\":null"));
        assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), r);
    }
}
