use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use super::{NoiseSpec, TokenError};
use crate::ring_crypto::{Modulus, RingElement, StreamCiphertext};

/// What a token does with one element of the encoded vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementDirective {
    Release,
    Withhold,
    /// Release the sum of all elements sharing this group id as one slot.
    Merge(u32),
    /// Release with a constant offset (fixed-point units).
    Shift(i64),
    /// Release with sampled noise.
    Perturb(NoiseSpec),
}

/// One output slot of a token, in terms of input element indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    Single(usize),
    Group(Vec<usize>),
    Withheld(usize),
}

/// Maps input elements to output slots. A merge group occupies the slot of
/// its lowest element; every other directive maps one element to one slot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputLayout {
    input_width: usize,
    slots: Vec<Slot>,
}

impl OutputLayout {
    pub fn from_directives(directives: &[ElementDirective]) -> Result<Self, TokenError> {
        if directives.is_empty() {
            return Err(TokenError::EmptyDirectives);
        }
        let mut slots = Vec::new();
        let mut groups: HashMap<u32, usize> = HashMap::new();
        for (j, d) in directives.iter().enumerate() {
            match d {
                ElementDirective::Withhold => slots.push(Slot::Withheld(j)),
                ElementDirective::Merge(g) => match groups.get(g) {
                    Some(&slot) => {
                        if let Slot::Group(members) = &mut slots[slot] {
                            members.push(j);
                        }
                    }
                    None => {
                        groups.insert(*g, slots.len());
                        slots.push(Slot::Group(vec![j]));
                    }
                },
                _ => slots.push(Slot::Single(j)),
            }
        }
        if slots.iter().all(|s| matches!(s, Slot::Withheld(_))) {
            return Err(TokenError::NothingReleased);
        }
        Ok(OutputLayout {
            input_width: directives.len(),
            slots,
        })
    }

    /// Releases every element unchanged.
    pub fn identity(width: usize) -> Self {
        OutputLayout {
            input_width: width,
            slots: (0..width).map(Slot::Single).collect(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn output_width(&self) -> usize {
        self.slots.len()
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    fn gather(&self, values: &[RingElement], m: Modulus) -> Vec<RingElement> {
        self.slots
            .iter()
            .map(|s| match s {
                Slot::Single(j) | Slot::Withheld(j) => values[*j],
                Slot::Group(js) => m.sum(js.iter().map(|j| values[*j])),
            })
            .collect()
    }

    /// Projects per-element key deltas onto slots; withheld slots are `None`.
    pub fn project_keys(&self, deltas: &[RingElement], m: Modulus) -> Vec<Option<RingElement>> {
        self.gather(deltas, m)
            .into_iter()
            .zip(&self.slots)
            .map(|(v, s)| (!matches!(s, Slot::Withheld(_))).then_some(v))
            .collect()
    }

    /// Applies the same projection to a ciphertext (server side).
    pub fn project_ciphertext(&self, ct: &StreamCiphertext, m: Modulus) -> StreamCiphertext {
        StreamCiphertext {
            t_curr: ct.t_curr,
            t_prev: ct.t_prev,
            body: self.gather(&ct.body, m),
        }
    }

    /// Applies the projection to plaintext values, hiding withheld slots.
    pub fn project_plain(&self, values: &[RingElement], m: Modulus) -> Vec<Option<RingElement>> {
        self.project_keys(values, m)
    }
}
