use std::collections::BTreeMap;

use crate::autodiff::Tensor;

/// Anything that owns named tensors an optimizer can update.
pub trait Parameters {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, t| {
            if t.requires_grad {
                n += t.numel();
            }
        });
        n
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, t| n += t.numel());
        n
    }

    /// Content hash of every tensor, keyed by name.
    fn census(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        self.for_each_param(&mut |name, t| {
            out.insert(name.to_string(), t.content_hash());
        });
        out
    }

    fn zero_grads(&mut self) {
        self.for_each_param_mut(&mut |_, t| t.zero_grad());
    }
}

/// Names whose hash differs between two censuses (including added or removed names).
pub fn census_diff(before: &BTreeMap<String, String>, after: &BTreeMap<String, String>) -> Vec<String> {
    let mut names: Vec<String> = before
        .iter()
        .filter(|(k, v)| after.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
        .collect();
    names.extend(after.keys().filter(|k| !before.contains_key(*k)).cloned());
    names.sort();
    names
}
