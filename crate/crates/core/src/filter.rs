//! Rule-based filtering of teacher masks: union masks, duplicates and dim
//! detections are discarded; masks themselves are never edited.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qa::nuclear_threshold;
use crate::raster::{
    footprint_iou, footprint_solidity, AnnotationSet, BoxIndex, ChannelStack, Footprint, InstanceMask, Stage,
    DEFAULT_SOLIDITY_THRESHOLD,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterParams {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    /// Re-add difference masks that look like nuclei.
    pub recover_branches: bool,
    pub solidity_threshold: f64,
    pub seed: u64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            beta1: 0.8,
            beta2: 0.7,
            beta3: 0.5,
            recover_branches: false,
            solidity_threshold: DEFAULT_SOLIDITY_THRESHOLD,
            seed: 0,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("beta3", self.beta3)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::param(name, format!("{v} is outside (0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.solidity_threshold) {
            return Err(Error::param("solidity_threshold", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Union,
    Duplicate,
    ExactDuplicate,
    Dim,
}

/// One line of the removal audit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    pub tile_id: String,
    pub mask_id: u64,
    pub rule: Rule,
    /// Union: component coverage. Duplicate: overlap over own area. Dim: mean intensity.
    pub ratio: f64,
    /// Union: component count. Duplicate: area ratio. Dim: threshold.
    pub secondary: f64,
    pub related: Vec<u64>,
}

fn footprints(set: &AnnotationSet) -> (Vec<Footprint>, BoxIndex) {
    let fps: Vec<Footprint> = set.instances().iter().map(|m| m.footprint()).collect();
    let index = BoxIndex::from_boxes(64, fps.iter().map(|f| f.bbox()));
    (fps, index)
}

/// Other masks `m` with `|target ∩ m| / |m| > beta1`, in set order.
pub fn find_union_components(target: &InstanceMask, all: &AnnotationSet, beta1: f64) -> Vec<InstanceMask> {
    let fp = target.footprint();
    all.instances()
        .iter()
        .filter(|m| m.id() != target.id() && m.bbox().intersect(&fp.bbox()).is_some())
        .filter(|m| {
            let other = m.footprint();
            fp.intersection_area(&other) as f64 / other.area() as f64 > beta1
        })
        .cloned()
        .collect()
}

fn covered_by(target: &Footprint, parts: &[&Footprint]) -> u64 {
    target
        .pixels()
        .filter(|&(x, y)| parts.iter().any(|p| p.contains(x, y)))
        .count() as u64
}

/// Discards masks that are mostly covered by two or more smaller masks they contain.
pub fn remove_union_masks(set: &AnnotationSet, beta1: f64, beta2: f64) -> Result<AnnotationSet> {
    Ok(union_pass(set, beta1, beta2, None)?.0)
}

fn union_pass(
    set: &AnnotationSet,
    beta1: f64,
    beta2: f64,
    recover: Option<&Recover>,
) -> Result<(AnnotationSet, Vec<Removal>)> {
    let (fps, index) = footprints(set);
    let inst = set.instances();
    let mut kept = Vec::new();
    let mut extra = Vec::new();
    let mut log = Vec::new();
    for (j, fj) in fps.iter().enumerate() {
        let comps: Vec<usize> = index
            .query(&fj.bbox())
            .into_iter()
            .filter(|&m| m != j && fj.intersection_area(&fps[m]) as f64 / fps[m].area() as f64 > beta1)
            .collect();
        let parts: Vec<&Footprint> = comps.iter().map(|&m| &fps[m]).collect();
        let coverage = covered_by(fj, &parts) as f64 / fj.area() as f64;
        if coverage > beta2 && comps.len() > 1 {
            log.push(Removal {
                tile_id: set.tile_id.clone(),
                mask_id: inst[j].id(),
                rule: Rule::Union,
                ratio: coverage,
                secondary: comps.len() as f64,
                related: comps.iter().map(|&m| inst[m].id()).collect(),
            });
        } else {
            kept.push(inst[j].clone());
            if let Some(r) = recover {
                for &m in &comps {
                    if let Some(d) = fj.difference(&fps[m]) {
                        if r.is_nucleus(&d) {
                            extra.push(d);
                        }
                    }
                }
            }
        }
    }
    let out = with_recovered(set, kept, extra)?;
    Ok((out, log))
}

/// Discards `p` when some `q` covers more than `beta3` of it and `p` is strictly
/// smaller; identical masks then collapse to the lowest id.
pub fn remove_duplicates(set: &AnnotationSet, beta3: f64) -> Result<AnnotationSet> {
    Ok(duplicate_pass(set, beta3, None)?.0)
}

fn duplicate_pass(set: &AnnotationSet, beta3: f64, recover: Option<&Recover>) -> Result<(AnnotationSet, Vec<Removal>)> {
    let (fps, index) = footprints(set);
    let inst = set.instances();
    let mut kept = Vec::new();
    let mut extra = Vec::new();
    let mut log = Vec::new();
    // lowest id among exact copies survives
    let mut order: Vec<usize> = (0..inst.len()).collect();
    order.sort_by_key(|&i| inst[i].id());
    let mut exact_drop = vec![None; inst.len()];
    for &p in &order {
        if exact_drop[p].is_some() {
            continue;
        }
        for q in index.query(&fps[p].bbox()) {
            if q != p && exact_drop[q].is_none() && inst[q].id() > inst[p].id() && fps[q] == fps[p] {
                exact_drop[q] = Some(inst[p].id());
            }
        }
    }
    for (p, fp) in fps.iter().enumerate() {
        let mut dup_of = None;
        let neighbours = index.query(&fp.bbox());
        for &q in &neighbours {
            if q == p {
                continue;
            }
            let inter = fp.intersection_area(&fps[q]) as f64 / fp.area() as f64;
            let ratio = fp.area() as f64 / fps[q].area() as f64;
            if inter > beta3 && ratio < 1.0 {
                dup_of = Some((q, inter, ratio));
                break;
            }
        }
        if let Some((q, inter, ratio)) = dup_of {
            log.push(Removal {
                tile_id: set.tile_id.clone(),
                mask_id: inst[p].id(),
                rule: Rule::Duplicate,
                ratio: inter,
                secondary: ratio,
                related: vec![inst[q].id()],
            });
            continue;
        }
        if let Some(keeper) = exact_drop[p] {
            log.push(Removal {
                tile_id: set.tile_id.clone(),
                mask_id: inst[p].id(),
                rule: Rule::ExactDuplicate,
                ratio: 1.0,
                secondary: 1.0,
                related: vec![keeper],
            });
            continue;
        }
        kept.push(inst[p].clone());
        if let Some(r) = recover {
            for &q in neighbours.iter().filter(|&&q| q != p) {
                if fp.intersection_area(&fps[q]) == 0 {
                    continue;
                }
                if let Some(d) = fp.difference(&fps[q]) {
                    if r.is_nucleus(&d) {
                        extra.push(d);
                    }
                }
            }
        }
    }
    let out = with_recovered(set, kept, extra)?;
    Ok((out, log))
}

fn with_recovered(set: &AnnotationSet, mut kept: Vec<InstanceMask>, extra: Vec<Footprint>) -> Result<AnnotationSet> {
    let mut next = set.next_id();
    let mut seen: Vec<Footprint> = kept.iter().map(|m| m.footprint()).collect();
    for d in extra {
        if seen.contains(&d) {
            continue;
        }
        kept.push(InstanceMask::from_footprint(next, &d)?);
        next += 1;
        seen.push(d);
    }
    set.with_instances(set.stage, kept)
}

/// Per-tile nuclear intensity and its foreground threshold.
pub struct DimRule {
    width: u32,
    values: Vec<u16>,
    threshold: Option<f64>,
}

impl DimRule {
    /// Fits the tile threshold; on failure every mask counts as bright.
    pub fn fit(nuclear: &ChannelStack, seed: u64) -> Result<Self> {
        let values = nuclear.nuclear_max()?;
        let threshold = match nuclear_threshold(nuclear, seed) {
            Ok(t) => Some(t),
            Err(e) => {
                log::warn!("foreground threshold unavailable, dim filter disabled: {e}");
                None
            }
        };
        Ok(Self {
            width: nuclear.width(),
            values,
            threshold,
        })
    }

    pub fn with_threshold(nuclear: &ChannelStack, threshold: f64) -> Result<Self> {
        Ok(Self {
            width: nuclear.width(),
            values: nuclear.nuclear_max()?,
            threshold: Some(threshold),
        })
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn mean_intensity(&self, fp: &Footprint) -> f64 {
        let height = self.values.len() as u32 / self.width;
        let (mut sum, mut n) = (0u64, 0u64);
        for (x, y) in fp.pixels() {
            if x < self.width && y < height {
                sum += self.values[(y * self.width + x) as usize] as u64;
            }
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            sum as f64 / n as f64
        }
    }

    pub fn is_dim(&self, fp: &Footprint) -> bool {
        match self.threshold {
            Some(t) => self.mean_intensity(fp) <= t,
            None => false,
        }
    }
}

struct Recover<'a> {
    dim: &'a DimRule,
    solidity: f64,
}

impl Recover<'_> {
    fn is_nucleus(&self, fp: &Footprint) -> bool {
        footprint_solidity(fp) >= self.solidity && !self.dim.is_dim(fp)
    }
}

/// Keeps masks whose mean `max(DAPI, PanHistone)` is strictly above the tile threshold.
pub fn filter_dim(set: &AnnotationSet, nuclear: &ChannelStack, seed: u64) -> Result<AnnotationSet> {
    let rule = DimRule::fit(nuclear, seed)?;
    Ok(dim_pass(set, &rule)?.0)
}

pub fn dim_pass(set: &AnnotationSet, rule: &DimRule) -> Result<(AnnotationSet, Vec<Removal>)> {
    let mut kept = Vec::new();
    let mut log = Vec::new();
    for m in set.instances() {
        let fp = m.footprint();
        if rule.is_dim(&fp) {
            log.push(Removal {
                tile_id: set.tile_id.clone(),
                mask_id: m.id(),
                rule: Rule::Dim,
                ratio: rule.mean_intensity(&fp),
                secondary: rule.threshold.unwrap_or(f64::NAN),
                related: Vec::new(),
            });
        } else {
            kept.push(m.clone());
        }
    }
    Ok((set.with_instances(set.stage, kept)?, log))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilteredTile {
    pub masks: AnnotationSet,
    pub removals: Vec<Removal>,
}

/// Union removal, then duplicate removal, then the dim check, on one tile.
pub fn filter_tile(nuclear: &ChannelStack, set: &AnnotationSet, params: &FilterParams) -> Result<FilteredTile> {
    params.validate()?;
    if set.width != nuclear.width() || set.height != nuclear.height() {
        return Err(Error::InvalidRaster(format!(
            "{}: masks are {}x{} but the image is {}x{}",
            set.tile_id,
            set.width,
            set.height,
            nuclear.width(),
            nuclear.height()
        )));
    }
    let dim = DimRule::fit(nuclear, params.seed)?;
    let recover = Recover {
        dim: &dim,
        solidity: params.solidity_threshold,
    };
    let recover = params.recover_branches.then_some(&recover);
    let (u, mut removals) = union_pass(set, params.beta1, params.beta2, recover)?;
    let (d, log) = duplicate_pass(&u, params.beta3, recover)?;
    removals.extend(log);
    let (f, log) = dim_pass(&d, &dim)?;
    removals.extend(log);
    Ok(FilteredTile {
        masks: f.with_instances(Stage::Filtered, f.instances().to_vec())?,
        removals,
    })
}

/// Filters every tile independently; tile order is preserved.
pub fn run_algorithm1(data: &[(ChannelStack, AnnotationSet)], params: &FilterParams) -> Result<Vec<FilteredTile>> {
    params.validate()?;
    data.par_iter()
        .map(|(img, set)| {
            if set.stage != Stage::Raw {
                return Err(Error::Stage {
                    stage: "filter".into(),
                    source: Box::new(Error::InvalidMask {
                        id: 0,
                        reason: format!("{} is not a raw mask set", set.tile_id),
                    }),
                });
            }
            filter_tile(img, set, params)
        })
        .collect()
}

fn best_iou(fp: &Footprint, others: &[Footprint], index: &BoxIndex) -> Result<f64> {
    let mut best = 0.0f64;
    for j in index.query(&fp.bbox()) {
        best = best.max(footprint_iou(fp, &others[j])?);
    }
    Ok(best)
}

/// Drops `primary` masks unmatched in `remover_ref`, then appends masks from
/// each recover set that match nothing already present.
pub fn consensus_postprocess(
    primary: &AnnotationSet,
    remover_ref: &AnnotationSet,
    recover_refs: &[AnnotationSet],
    match_iou: f64,
) -> Result<AnnotationSet> {
    let (rfps, rindex) = footprints(remover_ref);
    let mut kept = Vec::new();
    for m in primary.instances() {
        if best_iou(&m.footprint(), &rfps, &rindex)? > match_iou {
            kept.push(m.clone());
        }
    }
    let mut present: Vec<Footprint> = kept.iter().map(|m| m.footprint()).collect();
    let mut index = BoxIndex::from_boxes(64, present.iter().map(|f| f.bbox()));
    let mut next = primary.next_id();
    for set in recover_refs {
        for m in set.instances() {
            let fp = m.footprint();
            if best_iou(&fp, &present, &index)? > match_iou {
                continue;
            }
            kept.push(m.clone().with_id(next).clear_components());
            next += 1;
            index.insert(fp.bbox());
            present.push(fp);
        }
    }
    primary.with_instances(primary.stage, kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{DAPI, PAN_HISTONE};
    use proptest::prelude::*;

    fn set(fps: &[Footprint]) -> AnnotationSet {
        let inst = fps
            .iter()
            .enumerate()
            .map(|(i, f)| InstanceMask::from_footprint(i as u64 + 1, f).unwrap())
            .collect();
        AnnotationSet::new("t", 128, 128, Stage::Raw, inst).unwrap()
    }

    fn ids(s: &AnnotationSet) -> Vec<u64> {
        s.ids()
    }

    /// Bright where `bright` holds, dark elsewhere.
    fn image(bright: impl Fn(u32, u32) -> bool) -> ChannelStack {
        let mut dapi = Vec::new();
        for y in 0..128 {
            for x in 0..128 {
                dapi.push(if bright(x, y) {
                    900
                } else {
                    30 + ((x * 7 + y * 3) % 11) as u16
                });
            }
        }
        ChannelStack::from_planes(
            128,
            128,
            vec![(DAPI.into(), dapi), (PAN_HISTONE.into(), vec![0; 128 * 128])],
        )
        .unwrap()
    }

    #[test]
    fn union_components_cases() {
        let a = Footprint::rect(10, 10, 10, 10);
        let b = Footprint::rect(20, 10, 10, 10);
        let u = Footprint::rect(10, 10, 20, 10);
        let lone = Footprint::rect(80, 80, 5, 5);
        let half = Footprint::rect(25, 10, 10, 10);
        let s = set(&[a, b, u, lone, half]);
        let comps: Vec<u64> = find_union_components(&s.instances()[2], &s, 0.8)
            .iter()
            .map(|m| m.id())
            .collect();
        assert_eq!(comps, vec![1, 2]);
        assert!(find_union_components(&s.instances()[3], &s, 0.8).is_empty());
    }

    #[test]
    fn union_removal_cases() {
        let single = set(&[Footprint::rect(0, 0, 9, 9)]);
        assert_eq!(remove_union_masks(&single, 0.8, 0.7).unwrap(), single);

        // each component holds 40% of the union; the 20% gap is uncovered
        let a = Footprint::rect(10, 10, 8, 10);
        let b = Footprint::rect(22, 10, 8, 10);
        let u = Footprint::rect(10, 10, 20, 10);
        assert_eq!(
            ids(&remove_union_masks(&set(&[a.clone(), b, u.clone()]), 0.8, 0.7).unwrap()),
            vec![1, 2]
        );
        assert_eq!(ids(&remove_union_masks(&set(&[a, u]), 0.8, 0.7).unwrap()), vec![1, 2]);
    }

    #[test]
    fn duplicate_removal_cases() {
        let disjoint = set(&[Footprint::rect(0, 0, 5, 5), Footprint::rect(10, 10, 5, 5)]);
        assert_eq!(remove_duplicates(&disjoint, 0.5).unwrap(), disjoint);

        // p inside q with area ratio 0.6
        let q = Footprint::rect(10, 10, 10, 10);
        let p = Footprint::rect(10, 10, 6, 10);
        assert_eq!(ids(&remove_duplicates(&set(&[q, p]), 0.5).unwrap()), vec![1]);

        // equal area, 30% mutual overlap
        let a = Footprint::rect(10, 10, 10, 10);
        let b = Footprint::rect(17, 10, 10, 10);
        assert_eq!(ids(&remove_duplicates(&set(&[a.clone(), b]), 0.5).unwrap()), vec![1, 2]);

        // identical masks collapse to the lowest id
        assert_eq!(ids(&remove_duplicates(&set(&[a.clone(), a]), 0.5).unwrap()), vec![1]);
    }

    #[test]
    fn dim_cases() {
        let bright = Footprint::rect(20, 20, 10, 10);
        let img = image(|x, y| bright.contains(x, y));
        let s = set(&[bright.clone(), Footprint::rect(80, 80, 10, 10)]);
        assert_eq!(ids(&filter_dim(&s, &img, 0).unwrap()), vec![1]);

        // mean exactly at the threshold is dim
        let rule = DimRule::fit(&img, 0).unwrap();
        let mean = rule.mean_intensity(&bright);
        let at = DimRule::with_threshold(&img, mean).unwrap();
        assert!(at.is_dim(&bright));
        let below = DimRule::with_threshold(&img, mean - 1e-9).unwrap();
        assert!(!below.is_dim(&bright));
    }

    #[test]
    fn flat_image_keeps_everything() {
        let img = image(|_, _| true);
        let s = set(&[Footprint::rect(0, 0, 5, 5)]);
        assert_eq!(filter_dim(&s, &img, 0).unwrap().len(), 1);
    }

    #[test]
    fn fixture_with_one_of_each_error() {
        let a = Footprint::rect(10, 10, 8, 10);
        let b = Footprint::rect(22, 10, 8, 10);
        let u = Footprint::rect(10, 10, 20, 10);
        let c = Footprint::rect(60, 20, 12, 12);
        let dup = Footprint::rect(60, 20, 7, 12);
        let good = Footprint::rect(40, 60, 10, 10);
        let dim = Footprint::rect(90, 90, 10, 10);
        let lit = [a.clone(), b.clone(), c.clone(), good.clone()];
        let img = image(|x, y| lit.iter().any(|f| f.contains(x, y)));
        let s = set(&[a, b, u, c, dup, good, dim]);
        let out = filter_tile(&img, &s, &FilterParams::default()).unwrap();
        assert_eq!(ids(&out.masks), vec![1, 2, 4, 6]);
        assert_eq!(out.masks.stage, Stage::Filtered);
        let rules: Vec<(u64, Rule)> = out.removals.iter().map(|r| (r.mask_id, r.rule)).collect();
        assert_eq!(rules, vec![(3, Rule::Union), (5, Rule::Duplicate), (7, Rule::Dim)]);
    }

    #[test]
    fn clean_and_empty_tiles_unchanged() {
        let fps = [Footprint::rect(10, 10, 10, 10), Footprint::rect(50, 50, 12, 9)];
        let img = image(|x, y| fps.iter().any(|f| f.contains(x, y)));
        let s = set(&fps);
        let out = run_algorithm1(&[(img.clone(), s.clone()), (img, set(&[]))], &FilterParams::default()).unwrap();
        assert_eq!(out[0].masks.instances(), s.instances());
        assert!(out[1].masks.is_empty());
    }

    #[test]
    fn recover_branch_adds_difference() {
        // u covers a and b with a bright square hanging off; the leftover is recovered
        let a = Footprint::rect(10, 10, 8, 10);
        let b = Footprint::rect(22, 10, 8, 10);
        let u = Footprint::rect(10, 10, 20, 10);
        let q = Footprint::rect(60, 60, 20, 10);
        let p = Footprint::rect(60, 60, 20, 10).union(&Footprint::rect(60, 70, 20, 10));
        let img = image(|x, y| [&a, &b, &p].iter().any(|f| f.contains(x, y)));
        let s = set(&[a, b, u, q, p]);
        let on = FilterParams {
            recover_branches: true,
            ..FilterParams::default()
        };
        let out = filter_tile(&img, &s, &on).unwrap();
        let fps: Vec<Footprint> = out.masks.instances().iter().map(|m| m.footprint()).collect();
        assert!(fps.contains(&Footprint::rect(60, 70, 20, 10)));
        let off = filter_tile(&img, &s, &FilterParams::default()).unwrap();
        assert!(off.masks.len() < out.masks.len());
    }

    #[test]
    fn non_raw_input_rejected() {
        let img = image(|_, _| false);
        let s = set(&[]).with_instances(Stage::Filtered, vec![]).unwrap();
        assert!(run_algorithm1(&[(img, s)], &FilterParams::default()).is_err());
    }

    #[test]
    fn consensus_cases() {
        let a = Footprint::rect(10, 10, 10, 10);
        let b = Footprint::rect(40, 40, 10, 10);
        let s = set(&[a.clone(), b.clone()]);
        assert_eq!(consensus_postprocess(&s, &s, std::slice::from_ref(&s), 0.5).unwrap(), s);

        let extra = set(&[a.clone(), b.clone(), Footprint::rect(80, 80, 5, 5)]);
        assert_eq!(ids(&consensus_postprocess(&extra, &s, &[], 0.5).unwrap()), vec![1, 2]);

        let rec = set(&[Footprint::rect(100, 100, 8, 8)]);
        let out = consensus_postprocess(&s, &s, &[rec], 0.5).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out.instances()[2].footprint(), Footprint::rect(100, 100, 8, 8));
    }

    fn arb_rects() -> impl Strategy<Value = Vec<Footprint>> {
        prop::collection::vec((0u32..100, 0u32..100, 3u32..25, 3u32..25), 0..14)
            .prop_map(|v| v.into_iter().map(|(x, y, w, h)| Footprint::rect(x, y, w, h)).collect())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn idempotent_subset(fps in arb_rects()) {
            let img = image(|x, y| (x / 16 + y / 16) % 2 == 0);
            let s = set(&fps);
            let once = filter_tile(&img, &s, &FilterParams::default()).unwrap().masks;
            for m in once.instances() {
                prop_assert_eq!(s.get(m.id()), Some(m));
            }
            let raw = once.with_instances(Stage::Raw, once.instances().to_vec()).unwrap();
            let twice = filter_tile(&img, &raw, &FilterParams::default()).unwrap().masks;
            prop_assert_eq!(ids(&once), ids(&twice));
        }

        #[test]
        fn unit_thresholds_disable_rules(fps in arb_rects()) {
            let s = set(&fps);
            prop_assert_eq!(remove_union_masks(&s, 0.8, 1.0).unwrap().len(), s.len());
            // only exact copies may still collapse
            let mut distinct = fps.clone();
            distinct.sort_by_key(|f| (f.bbox(), f.area()));
            distinct.dedup();
            prop_assert_eq!(remove_duplicates(&s, 1.0).unwrap().len(), distinct.len());
        }

        #[test]
        fn survivors_permutation_invariant(fps in arb_rects(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let s = set(&fps);
            let mut shuffled = s.instances().to_vec();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let t = s.with_instances(Stage::Raw, shuffled).unwrap();
            let mut a = ids(&remove_duplicates(&remove_union_masks(&s, 0.8, 0.7).unwrap(), 0.5).unwrap());
            let mut b = ids(&remove_duplicates(&remove_union_masks(&t, 0.8, 0.7).unwrap(), 0.5).unwrap());
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }
    }
}
