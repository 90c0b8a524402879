//! Subset algebra: difference operators, signed expansions and exhaustive
//! oracles for the inclusion-exclusion identities.
//!
//! Local computations over a small ground set (at most 32 elements) use `u32`
//! masks. The C-type perturbations are written in terms of a *valuation*
//! `V(U)`, the perturbation produced by switching on the union of the members
//! of `U`. For the indicator valuation `V(U) = [U ∩ N ≠ ∅]` they reduce to the
//! indicators of `J^H`, `J_S`, `J_{E||F}` and `J^H_{||G}`; since every
//! valuation with `V(∅) = 0` is a combination of indicator valuations, every
//! linear identity between these objects holds for all valuations.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::process::InclusionConfiguration;

/// A finite set of inclusion indices, kept sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct SubsetSelector(Vec<usize>);

impl TryFrom<Vec<usize>> for SubsetSelector {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        SubsetSelector::new(v)
    }
}

impl From<SubsetSelector> for Vec<usize> {
    fn from(s: SubsetSelector) -> Self {
        s.0
    }
}

impl fmt::Display for SubsetSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, n) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{n}")?;
        }
        write!(f, "}}")
    }
}

impl SubsetSelector {
    /// Builds a selector; repeated indices are an error.
    pub fn new(indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut v: Vec<usize> = indices.into_iter().collect();
        v.sort_unstable();
        if let Some(w) = v.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::invalid("subset", format!("index {} repeated", w[0])));
        }
        Ok(SubsetSelector(v))
    }

    pub(crate) fn from_sorted_unchecked(v: Vec<usize>) -> Self {
        debug_assert!(v.windows(2).all(|w| w[0] < w[1]));
        SubsetSelector(v)
    }

    pub fn empty() -> Self {
        SubsetSelector(Vec::new())
    }

    pub fn singleton(n: usize) -> Self {
        SubsetSelector(vec![n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn contains(&self, n: usize) -> bool {
        self.0.binary_search(&n).is_ok()
    }

    pub fn union(&self, other: &Self) -> Self {
        let mut v = self.0.clone();
        v.extend_from_slice(&other.0);
        v.sort_unstable();
        v.dedup();
        SubsetSelector(v)
    }

    pub fn difference(&self, other: &Self) -> Self {
        SubsetSelector(
            self.0
                .iter()
                .copied()
                .filter(|n| !other.contains(*n))
                .collect(),
        )
    }

    pub fn intersection(&self, other: &Self) -> Self {
        SubsetSelector(
            self.0
                .iter()
                .copied()
                .filter(|n| other.contains(*n))
                .collect(),
        )
    }

    pub fn with(&self, n: usize) -> Self {
        self.union(&SubsetSelector::singleton(n))
    }

    pub fn without(&self, n: usize) -> Self {
        SubsetSelector(self.0.iter().copied().filter(|&m| m != n).collect())
    }

    pub fn is_disjoint(&self, other: &Self) -> bool {
        self.0.iter().all(|n| !other.contains(*n))
    }

    pub fn is_subset(&self, other: &Self) -> bool {
        self.0.iter().all(|n| other.contains(*n))
    }

    pub fn check_range(&self, len: usize) -> Result<()> {
        match self.0.last() {
            Some(&m) if m >= len => Err(Error::IndexOutOfRange { index: m, len }),
            _ => Ok(()),
        }
    }

    /// Sub-selector picked by the bits of `mask` (bit `i` selects the `i`-th
    /// smallest element).
    pub fn pick(&self, mask: u32) -> Self {
        SubsetSelector(
            self.0
                .iter()
                .enumerate()
                .filter(|(i, _)| mask >> i & 1 == 1)
                .map(|(_, &n)| n)
                .collect(),
        )
    }

    /// All subsets, ordered by size and then lexicographically.
    pub fn subsets(&self) -> Vec<SubsetSelector> {
        assert!(
            self.len() <= 20,
            "refusing to enumerate 2^{} subsets",
            self.len()
        );
        let mut out: Vec<SubsetSelector> = (0..1u32 << self.len()).map(|m| self.pick(m)).collect();
        out.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.0.cmp(&b.0)));
        out
    }
}

fn disjoint_or_err(a: &SubsetSelector, b: &SubsetSelector) -> Result<()> {
    match a.iter().find(|n| b.contains(*n)) {
        Some(n) => Err(Error::Overlap(n)),
        None => Ok(()),
    }
}

/// Signed subsets in size-then-lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedTermList(pub Vec<(i8, SubsetSelector)>);

impl SignedTermList {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sign_sum(&self) -> i64 {
        self.0.iter().map(|(s, _)| *s as i64).sum()
    }

    pub fn signs(&self) -> Vec<i8> {
        self.0.iter().map(|(s, _)| *s).collect()
    }
}

/// `δ^F φ^H = Σ_{G⊆F} (−1)^{|F∖G|} φ^{G∪H}`.
pub fn delta_expansion(f: &SubsetSelector, h: &SubsetSelector) -> Result<SignedTermList> {
    disjoint_or_err(f, h)?;
    Ok(SignedTermList(
        f.subsets()
            .into_iter()
            .map(|g| (parity(f.len() - g.len()), g.union(h)))
            .collect(),
    ))
}

/// Inclusion-exclusion terms of `C^E` truncated at sets of size `gamma_cap`.
pub fn ie_expand(e: &SubsetSelector, gamma_cap: usize) -> Result<SignedTermList> {
    if gamma_cap == 0 {
        return Err(Error::invalid("gamma_cap", "must be at least 1"));
    }
    Ok(SignedTermList(
        e.subsets()
            .into_iter()
            .filter(|s| !s.is_empty() && s.len() <= gamma_cap)
            .map(|s| (parity(s.len() + 1), s))
            .collect(),
    ))
}

pub fn parity(n: usize) -> i8 {
    if n.is_multiple_of(2) {
        1
    } else {
        -1
    }
}

/// Submasks of `m` in increasing numeric order, `0` included.
pub fn submasks(m: u32) -> impl Iterator<Item = u32> {
    let mut next = Some(0u32);
    std::iter::from_fn(move || {
        let s = next?;
        next = if s == m {
            None
        } else {
            Some((s.wrapping_sub(m)) & m)
        };
        Some(s)
    })
}

fn sign_of(mask: u32) -> i64 {
    parity(mask.count_ones() as usize) as i64
}

/// `C^H = V(H)`.
pub fn c_union<V: Fn(u32) -> f64>(v: &V, h: u32) -> f64 {
    v(h)
}

/// `C_S = Σ_{∅≠U⊆S} (−1)^{|U|+1} V(U)`.
pub fn c_inter<V: Fn(u32) -> f64>(v: &V, s: u32) -> f64 {
    submasks(s)
        .skip(1)
        .map(|u| -(sign_of(u) as f64) * v(u))
        .sum()
}

/// `C_{E||F} = Σ_{∅≠S⊆E} (−1)^{|S|+1} (V(S∪F) − V(F))`; zero for `E = ∅`.
pub fn c_inter_excl<V: Fn(u32) -> f64>(v: &V, e: u32, f: u32) -> f64 {
    let vf = v(f);
    submasks(e)
        .skip(1)
        .map(|s| -(sign_of(s) as f64) * (v(s | f) - vf))
        .sum()
}

/// `C^H_{||G} = V(H∪G) − V(G)`.
pub fn c_union_excl<V: Fn(u32) -> f64>(v: &V, h: u32, g: u32) -> f64 {
    v(h | g) - v(g)
}

/// Synthetic overlap pattern: for each cell, the mask of ground-set members
/// covering it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapTable {
    pub ground: usize,
    pub cells: Vec<u32>,
}

impl OverlapTable {
    pub fn random(ground: usize, cells: usize, rng: &mut impl Rng) -> Self {
        let full = (1u32 << ground) - 1;
        OverlapTable {
            ground,
            cells: (0..cells).map(|_| rng.random::<u32>() & full).collect(),
        }
    }

    /// Every possible overlap pattern once.
    pub fn exhaustive(ground: usize) -> Self {
        OverlapTable {
            ground,
            cells: (0..1u32 << ground).collect(),
        }
    }
}

fn ind(b: bool) -> i64 {
    b as i64
}

/// `1_{J_S}` for `S ≠ ∅`.
fn j_inter(s: u32, n: u32) -> i64 {
    ind(s != 0 && s & n == s)
}

fn j_union(h: u32, n: u32) -> i64 {
    ind(h & n != 0)
}

fn j_inter_excl(s: u32, g: u32, n: u32) -> i64 {
    ind(s != 0 && s & n == s && g & n == 0)
}

fn j_union_excl(h: u32, g: u32, n: u32) -> i64 {
    ind(h & n != 0 && g & n == 0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityViolation {
    pub identity: String,
    pub first: Vec<usize>,
    pub second: Vec<usize>,
    pub cell: usize,
    pub lhs: i64,
    pub rhs: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub checked: u64,
    pub violations: Vec<IdentityViolation>,
}

impl IdentityReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn merge(&mut self, other: IdentityReport) {
        self.checked += other.checked;
        self.violations.extend(other.violations);
    }

    fn record(&mut self, identity: &str, a: u32, b: u32, cell: usize, lhs: i64, rhs: i64) {
        self.checked += 1;
        if lhs != rhs {
            self.violations.push(IdentityViolation {
                identity: identity.to_string(),
                first: bits(a),
                second: bits(b),
                cell,
                lhs,
                rhs,
            });
        }
    }
}

fn bits(m: u32) -> Vec<usize> {
    (0..32).filter(|i| m >> i & 1 == 1).collect()
}

fn check_ground(k: usize) -> Result<()> {
    if k > 4 {
        return Err(Error::invalid(
            "ground_set_size",
            format!("exhaustive range is k <= 4, got {k}"),
        ));
    }
    Ok(())
}

/// Checks, for all disjoint `H, G` over the ground set and every cell,
/// `C^H = Σ_{∅≠S⊆H} (−1)^{|S|+1} C_S`,
/// `C^H_{||G} = Σ_{∅≠S⊆H} (−1)^{|S|+1} C_{S||G}` and
/// `C_{G||H} = Σ_{S⊆H} (−1)^{|S|} C_{S∪G}` (`G ≠ ∅`), in integer arithmetic.
pub fn verify_ie_identities(k: usize, table: &OverlapTable) -> Result<IdentityReport> {
    check_ground(k)?;
    let full = (1u32 << k) - 1;
    let mut rep = IdentityReport::default();
    for (c, &n) in table.cells.iter().enumerate() {
        let n = n & full;
        for h in submasks(full) {
            for g in submasks(full & !h) {
                if g == 0 {
                    let rhs: i64 = submasks(h)
                        .skip(1)
                        .map(|s| -sign_of(s) * j_inter(s, n))
                        .sum();
                    rep.record("union", h, g, c, j_union(h, n), rhs);
                }
                let rhs: i64 = submasks(h)
                    .skip(1)
                    .map(|s| -sign_of(s) * j_inter_excl(s, g, n))
                    .sum();
                rep.record("union-excluding", h, g, c, j_union_excl(h, g, n), rhs);
                if g != 0 {
                    let rhs: i64 = submasks(h).map(|s| sign_of(s) * j_inter(s | g, n)).sum();
                    rep.record(
                        "intersection-excluding",
                        g,
                        h,
                        c,
                        j_inter_excl(g, h, n),
                        rhs,
                    );
                }
            }
        }
    }
    Ok(rep)
}

/// Checks `(−1)^{|G|} C_G = Σ_{H⊆G} (−1)^{|G∖H|} C^{G∖H}_{||H}` on every cell
/// of `table` for all nonempty `G`, and the gradient identity
/// `δ^G φ^{F∪H} = Σ_{S⊆F} δ^{S∪G} φ^H` as a formal identity for all disjoint
/// `F, G, H`.
pub fn verify_combinatorial_lemma(k: usize, table: &OverlapTable) -> Result<IdentityReport> {
    check_ground(k)?;
    let full = (1u32 << k) - 1;
    let mut rep = IdentityReport::default();
    for (c, &n) in table.cells.iter().enumerate() {
        let n = n & full;
        for g in submasks(full).skip(1) {
            let rhs: i64 = submasks(g)
                .map(|h| sign_of(g & !h) * j_union_excl(g & !h, h, n))
                .sum();
            rep.record("peeling-lemma", g, 0, c, sign_of(g) * j_inter(g, n), rhs);
        }
    }
    rep.merge(verify_binomial_gradient_identity(k)?);
    Ok(rep)
}

/// Coefficient map of `δ^G φ^H` over the symbols `φ^X`.
fn delta_coefficients(g: u32, h: u32, out: &mut BTreeMap<u32, i64>, weight: i64) {
    for u in submasks(g) {
        *out.entry(u | h).or_insert(0) += weight * sign_of(g & !u);
    }
}

pub fn verify_binomial_gradient_identity(k: usize) -> Result<IdentityReport> {
    if k > 8 {
        return Err(Error::invalid(
            "ground_set_size",
            "formal check limited to k <= 8",
        ));
    }
    let full = (1u32 << k) - 1;
    let mut rep = IdentityReport::default();
    for f in submasks(full) {
        for g in submasks(full & !f) {
            for h in submasks(full & !f & !g) {
                let mut lhs = BTreeMap::new();
                delta_coefficients(g, f | h, &mut lhs, 1);
                let mut rhs = BTreeMap::new();
                for s in submasks(f) {
                    delta_coefficients(s | g, h, &mut rhs, 1);
                }
                lhs.retain(|_, c| *c != 0);
                rhs.retain(|_, c| *c != 0);
                let mismatch =
                    lhs.len() != rhs.len() || lhs.iter().any(|(x, c)| rhs.get(x) != Some(c));
                rep.record("binomial-gradient", f, g, 0, 0, mismatch as i64);
            }
        }
    }
    Ok(rep)
}

/// All `k`-subsets (`k ≤ 2`) whose periodic diameter is at most `r_cut`.
pub fn k_tuples_within(
    config: &InclusionConfiguration,
    k: usize,
    r_cut: f64,
) -> Result<Vec<SubsetSelector>> {
    if r_cut.is_nan() || r_cut <= 0.0 {
        return Err(Error::invalid(
            "r_cut",
            format!("must be positive, got {r_cut}"),
        ));
    }
    let n = config.len();
    match k {
        0 => Ok(vec![SubsetSelector::empty()]),
        1 => Ok((0..n).map(SubsetSelector::singleton).collect()),
        2 => {
            let bx = config.bx();
            let mut out = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if bx.distance(config.center(i), config.center(j)) <= r_cut {
                        out.push(SubsetSelector::from_sorted_unchecked(vec![i, j]));
                    }
                }
            }
            Ok(out)
        }
        _ => Err(Error::invalid(
            "k",
            format!("only k <= 2 is implemented, got {k}"),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s(v: &[usize]) -> SubsetSelector {
        SubsetSelector::new(v.iter().copied()).unwrap()
    }

    #[test]
    fn selector_basics() {
        assert!(SubsetSelector::new([1, 1]).is_err());
        let a = s(&[3, 1]);
        assert_eq!(a.as_slice(), &[1, 3]);
        assert_eq!(a.to_string(), "{1,3}");
        assert_eq!(a.union(&s(&[2])), s(&[1, 2, 3]));
        assert_eq!(a.difference(&s(&[3])), s(&[1]));
        assert!(a.check_range(4).is_ok());
        assert!(matches!(
            a.check_range(3),
            Err(Error::IndexOutOfRange { index: 3, len: 3 })
        ));
        let subs: Vec<String> = s(&[1, 2]).subsets().iter().map(|x| x.to_string()).collect();
        assert_eq!(subs, ["{}", "{1}", "{2}", "{1,2}"]);
        let j = serde_json::to_string(&a).unwrap();
        assert_eq!(j, "[1,3]");
        assert!(serde_json::from_str::<SubsetSelector>("[2,2]").is_err());
    }

    #[test]
    fn delta_expansion_examples() {
        assert_eq!(
            delta_expansion(&s(&[]), &s(&[4])).unwrap().0,
            vec![(1, s(&[4]))]
        );
        assert_eq!(
            delta_expansion(&s(&[5]), &s(&[])).unwrap().0,
            vec![(-1, s(&[])), (1, s(&[5]))]
        );
        let t = delta_expansion(&s(&[1, 2]), &s(&[])).unwrap();
        assert_eq!(
            t.0,
            vec![(1, s(&[])), (-1, s(&[1])), (-1, s(&[2])), (1, s(&[1, 2]))]
        );
        assert!(matches!(
            delta_expansion(&s(&[1, 2]), &s(&[2])),
            Err(Error::Overlap(2))
        ));
    }

    #[test]
    fn delta_signs_cancel() {
        for k in 1..=8 {
            let f = SubsetSelector::new(0..k).unwrap();
            let t = delta_expansion(&f, &s(&[20])).unwrap();
            assert_eq!(t.len(), 1 << k);
            assert_eq!(t.sign_sum(), 0);
        }
    }

    #[test]
    fn ie_expand_examples() {
        let t = ie_expand(&s(&[1, 2]), 2).unwrap();
        assert_eq!(t.0, vec![(1, s(&[1])), (1, s(&[2])), (-1, s(&[1, 2]))]);
        assert!(ie_expand(&s(&[]), 2).unwrap().is_empty());
        assert_eq!(
            ie_expand(&s(&[1, 2, 3]), 3).unwrap().signs(),
            vec![1, 1, 1, -1, -1, -1, 1]
        );
        assert_eq!(ie_expand(&s(&[1, 2, 3]), 1).unwrap().len(), 3);
        assert!(ie_expand(&s(&[1]), 0).is_err());
    }

    #[test]
    fn submask_enumeration() {
        assert_eq!(submasks(0b101).collect::<Vec<_>>(), vec![0, 1, 4, 5]);
        assert_eq!(submasks(0).collect::<Vec<_>>(), vec![0]);
        assert_eq!(submasks(0b1111).count(), 16);
    }

    #[test]
    fn disjoint_and_nested_tables() {
        // two disjoint sets: C^{1,2} = C_1 + C_2
        let disjoint = OverlapTable {
            ground: 2,
            cells: vec![0b00, 0b01, 0b10],
        };
        for &n in &disjoint.cells {
            assert_eq!(j_union(0b11, n), j_inter(0b01, n) + j_inter(0b10, n));
        }
        let nested = OverlapTable {
            ground: 2,
            cells: vec![0b00, 0b10, 0b11],
        };
        assert!(verify_ie_identities(2, &nested).unwrap().passed());
        assert!(verify_combinatorial_lemma(2, &nested).unwrap().passed());
    }

    #[test]
    fn exhaustive_tables_pass() {
        for k in 0..=4 {
            let t = OverlapTable::exhaustive(k);
            let r = verify_ie_identities(k, &t).unwrap();
            assert!(r.passed() && r.checked > 0);
            assert!(verify_combinatorial_lemma(k, &t).unwrap().passed());
        }
        assert!(verify_ie_identities(5, &OverlapTable::exhaustive(5)).is_err());
    }

    #[test]
    fn oracle_detects_a_wrong_identity() {
        // sanity of the oracle itself: a deliberately wrong sign is caught
        let n = 0b11;
        let rhs: i64 = submasks(0b11)
            .skip(1)
            .map(|s| sign_of(s) * j_inter(s, n))
            .sum();
        assert_ne!(rhs, j_union(0b11, n));
    }

    #[test]
    fn eq_2_10_formal_identity() {
        let r = verify_binomial_gradient_identity(5).unwrap();
        assert!(r.passed());
        assert_eq!(r.checked, 4u64.pow(5));
    }

    #[test]
    fn valuation_objects_match_indicators() {
        for n in 0..16u32 {
            let v = |u: u32| j_union(u, n) as f64;
            for a in 0..16u32 {
                assert_eq!(c_union(&v, a), j_union(a, n) as f64);
                if a != 0 {
                    assert_eq!(c_inter(&v, a), j_inter(a, n) as f64);
                }
                for b in submasks(15 & !a) {
                    assert_eq!(c_union_excl(&v, a, b), j_union_excl(a, b, n) as f64);
                    assert_eq!(c_inter_excl(&v, a, b), j_inter_excl(a, b, n) as f64);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn identities_hold_for_arbitrary_valuations(vals in prop::collection::vec(-1000i64..1000, 16)) {
            // V(∅) = 0, otherwise arbitrary integers
            let v = |u: u32| if u == 0 { 0.0 } else { vals[u as usize] as f64 };
            let full = 15u32;
            for h in submasks(full) {
                for g in submasks(full & !h) {
                    let rhs: f64 = submasks(h).skip(1).map(|s| -(sign_of(s) as f64) * c_inter_excl(&v, s, g)).sum();
                    prop_assert_eq!(c_union_excl(&v, h, g), rhs);
                    if g != 0 {
                        let rhs: f64 = submasks(h).map(|s| sign_of(s) as f64 * c_inter(&v, s | g)).sum();
                        prop_assert_eq!(c_inter_excl(&v, g, h), rhs);
                    }
                }
            }
            for g in submasks(full).skip(1) {
                let rhs: f64 = submasks(g).map(|h| sign_of(g & !h) as f64 * c_union_excl(&v, g & !h, h)).sum();
                prop_assert_eq!(sign_of(g) as f64 * c_inter(&v, g), rhs);
            }
        }
    }

    #[test]
    fn random_tables_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let t = OverlapTable::random(4, 16, &mut rng);
            assert!(verify_ie_identities(4, &t).unwrap().passed());
            assert!(verify_combinatorial_lemma(4, &t).unwrap().passed());
        }
    }
}
