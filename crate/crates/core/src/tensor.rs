//! Dense arrays and named parameter trees.
//!
//! Every tensor in the crate is an [`Array`]: a shape plus row-major `f64`
//! data. Network parameters are grouped per component into a [`ParamTree`],
//! whose entries are kept sorted by path so that flattening order is fixed.

use std::fmt;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::LengthMismatch {
                expected: n,
                got: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut a = Self::zeros(shape);
        a.data.fill(value);
        a
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::LengthMismatch {
                expected: n,
                got: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::non_finite(context))
        }
    }

    pub fn dot(&self, other: &Array) -> f64 {
        dot(&self.data, &other.data)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Which network component a parameter tree belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Encoder,
    QHead,
    Dynamics,
    Projection,
    Prediction,
    TargetEncoder,
    TargetProjection,
    AuxHead,
    /// Anything that is not one of the named components (test fixtures, scratch trees).
    Other,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::Encoder => "encoder",
            Component::QHead => "q_head",
            Component::Dynamics => "dynamics",
            Component::Projection => "projection",
            Component::Prediction => "prediction",
            Component::TargetEncoder => "target_encoder",
            Component::TargetProjection => "target_projection",
            Component::AuxHead => "aux_head",
            Component::Other => "other",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "encoder" => Component::Encoder,
            "q_head" => Component::QHead,
            "dynamics" => Component::Dynamics,
            "projection" => Component::Projection,
            "prediction" => Component::Prediction,
            "target_encoder" => Component::TargetEncoder,
            "target_projection" => Component::TargetProjection,
            "aux_head" => Component::AuxHead,
            "other" => Component::Other,
            _ => return None,
        })
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ordered, uniquely-named collection of parameter arrays.
///
/// Entries are always sorted by path, which makes [`ParamTree::flatten`]
/// path-lexicographic. Trees that mirror each other (gradients, traces,
/// momenta) have the same paths and shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTree {
    component: Component,
    entries: Vec<(String, Array)>,
}

impl ParamTree {
    pub fn new(component: Component) -> Self {
        Self {
            component,
            entries: Vec::new(),
        }
    }

    pub fn component(&self) -> Component {
        self.component
    }

    pub fn with_component(mut self, component: Component) -> Self {
        self.component = component;
        self
    }

    pub fn insert(&mut self, path: impl Into<String>, array: Array) -> Result<()> {
        let path = path.into();
        match self.entries.binary_search_by(|(p, _)| p.as_str().cmp(&path)) {
            Ok(_) => Err(Error::TreeMismatch { path }),
            Err(i) => {
                self.entries.insert(i, (path, array));
                Ok(())
            }
        }
    }

    pub fn get(&self, path: &str) -> Option<&Array> {
        self.entries
            .binary_search_by(|(p, _)| p.as_str().cmp(path))
            .ok()
            .map(|i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Array> {
        self.entries
            .binary_search_by(|(p, _)| p.as_str().cmp(path))
            .ok()
            .map(move |i| &mut self.entries[i].1)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.get(path).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.entries.iter().map(|(p, a)| (p.as_str(), a))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array)> {
        self.entries.iter_mut().map(|(p, a)| (p.as_str(), a))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(p, _)| p.as_str())
    }

    /// Number of entries (arrays), not elements.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total element count over all entries.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            component: self.component,
            entries: self
                .entries
                .iter()
                .map(|(p, a)| (p.clone(), Array::zeros(a.shape())))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for (_, a) in &self.entries {
            out.extend_from_slice(a.data());
        }
        out
    }

    pub fn unflatten(values: &[f64], template: &ParamTree) -> Result<Self> {
        let n = template.numel();
        if values.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: values.len(),
            });
        }
        let mut offset = 0;
        let entries = template
            .entries
            .iter()
            .map(|(p, a)| {
                let len = a.len();
                let arr = Array {
                    shape: a.shape().to_vec(),
                    data: values[offset..offset + len].to_vec(),
                };
                offset += len;
                (p.clone(), arr)
            })
            .collect();
        Ok(Self {
            component: template.component,
            entries,
        })
    }

    pub fn same_structure(&self, other: &ParamTree) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((p, a), (q, b))| p == q && a.shape() == b.shape())
    }

    pub fn check_structure(&self, other: &ParamTree) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            let path = self
                .paths()
                .find(|p| !other.contains(p))
                .or_else(|| other.paths().find(|p| !self.contains(p)))
                .unwrap_or("<root>")
                .to_string();
            return Err(Error::TreeMismatch { path });
        }
        for ((p, a), (q, b)) in self.entries.iter().zip(&other.entries) {
            if p != q {
                return Err(Error::TreeMismatch { path: p.clone() });
            }
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    layer: p.clone(),
                    expected: a.shape().to_vec(),
                    got: b.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// `self += alpha * other` over every entry.
    pub fn axpy(&mut self, alpha: f64, other: &ParamTree) -> Result<()> {
        self.check_structure(other)?;
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    /// `self += alpha * other` for the entries `other` has; `other` must be a
    /// subset of `self` with matching shapes.
    pub fn axpy_subset(&mut self, alpha: f64, other: &ParamTree) -> Result<()> {
        for (p, b) in &other.entries {
            let a = self
                .get_mut(p)
                .ok_or_else(|| Error::TreeMismatch { path: p.clone() })?;
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    layer: p.clone(),
                    expected: a.shape().to_vec(),
                    got: b.shape().to_vec(),
                });
            }
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    /// The entries of `self` whose paths appear in `template`.
    pub fn restrict(&self, template: &ParamTree) -> Result<ParamTree> {
        let mut out = ParamTree::new(template.component);
        for p in template.paths() {
            let a = self
                .get(p)
                .ok_or_else(|| Error::TreeMismatch { path: p.to_string() })?;
            out.entries.push((p.to_string(), a.clone()));
        }
        out.check_structure(template)?;
        Ok(out)
    }

    /// The entries of `self` whose paths do not appear in `template`.
    pub fn exclude(&self, template: &ParamTree) -> ParamTree {
        ParamTree {
            component: self.component,
            entries: self
                .entries
                .iter()
                .filter(|(p, _)| !template.contains(p))
                .cloned()
                .collect(),
        }
    }

    /// Overwrite the entries of `self` that `other` has.
    pub fn assign_subset(&mut self, other: &ParamTree) -> Result<()> {
        for (p, b) in &other.entries {
            let a = self
                .get_mut(p)
                .ok_or_else(|| Error::TreeMismatch { path: p.clone() })?;
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    layer: p.clone(),
                    expected: a.shape().to_vec(),
                    got: b.shape().to_vec(),
                });
            }
            a.data.copy_from_slice(&b.data);
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        for (_, a) in &mut self.entries {
            a.data.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            component: self.component,
            entries: self
                .entries
                .iter()
                .map(|(p, a)| {
                    let data = a.data.iter().map(|x| x * alpha).collect();
                    (p.clone(), Array { shape: a.shape.clone(), data })
                })
                .collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for (_, a) in &mut self.entries {
            a.data.fill(0.0);
        }
    }

    pub fn dot(&self, other: &ParamTree) -> Result<f64> {
        self.check_structure(other)?;
        Ok(self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|((_, a), (_, b))| dot(&a.data, &b.data))
            .sum())
    }

    pub fn norm_sq(&self) -> f64 {
        self.entries
            .iter()
            .map(|(_, a)| dot(&a.data, &a.data))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn l1_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, a)| a.data.iter())
            .map(|x| x.abs())
            .sum()
    }

    pub fn is_zero(&self) -> bool {
        self.entries
            .iter()
            .all(|(_, a)| a.data.iter().all(|&x| x == 0.0))
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, a)| a.is_finite())
    }

    pub fn check_finite(&self) -> Result<()> {
        for (p, a) in &self.entries {
            if !a.is_finite() {
                return Err(Error::non_finite(format!("{}/{}", self.component, p)));
            }
        }
        Ok(())
    }

    /// FNV-1a over the raw bits of every value, in flatten order.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (p, a) in &self.entries {
            for b in p.bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x100_0000_01b3);
            }
            for v in &a.data {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x100_0000_01b3);
                }
            }
        }
        h
    }

    /// Writes the checkpoint format: a text header of `(path, shape)` lines
    /// followed by little-endian `f32` values in flatten order.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "paramtree v1")?;
        writeln!(w, "component {}", self.component)?;
        writeln!(w, "entries {}", self.entries.len())?;
        for (p, a) in &self.entries {
            let dims: Vec<String> = a.shape().iter().map(|d| d.to_string()).collect();
            writeln!(w, "{} {}", p, dims.join(","))?;
        }
        writeln!(w, "data f32le {}", self.numel())?;
        for (_, a) in &self.entries {
            for &v in a.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        fn bad(msg: impl Into<String>) -> Error {
            Error::Format {
                what: "paramtree",
                msg: msg.into(),
            }
        }
        let mut line = String::new();
        let mut next_line = |r: &mut R| -> Result<String> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(bad("unexpected end of header"));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };

        if next_line(&mut r)? != "paramtree v1" {
            return Err(bad("missing magic line"));
        }
        let comp_line = next_line(&mut r)?;
        let component = comp_line
            .strip_prefix("component ")
            .and_then(Component::from_name)
            .ok_or_else(|| bad(format!("bad component line `{comp_line}`")))?;
        let n_line = next_line(&mut r)?;
        let n: usize = n_line
            .strip_prefix("entries ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("bad entries line `{n_line}`")))?;

        let mut specs = Vec::with_capacity(n);
        for _ in 0..n {
            let l = next_line(&mut r)?;
            let (path, dims) = l
                .rsplit_once(' ')
                .ok_or_else(|| bad(format!("bad entry line `{l}`")))?;
            let shape: Vec<usize> = if dims.is_empty() {
                Vec::new()
            } else {
                dims.split(',')
                    .map(|d| d.parse().map_err(|_| bad(format!("bad dim `{d}`"))))
                    .collect::<Result<_>>()?
            };
            specs.push((path.to_string(), shape));
        }
        let d_line = next_line(&mut r)?;
        let total: usize = d_line
            .strip_prefix("data f32le ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("bad data line `{d_line}`")))?;

        let mut tree = ParamTree::new(component);
        let mut seen = 0;
        let mut buf = [0u8; 4];
        for (path, shape) in specs {
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                r.read_exact(&mut buf)?;
                data.push(f64::from(f32::from_le_bytes(buf)));
            }
            seen += len;
            tree.insert(path, Array::from_vec(&shape, data)?)?;
        }
        if seen != total {
            return Err(bad(format!("header declares {total} values, entries hold {seen}")));
        }
        Ok(tree)
    }
}
