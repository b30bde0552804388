//! The saved-for-backward context: one payload per distinct tensor, slots as
//! views onto payloads.
//!
//! Every stored tensor carries a footprint (producer token, element count,
//! content checksum). Two slots declaring the same tensor share one payload;
//! the second insert registers an alias and costs no storage. Activation
//! payloads are quantized per the active scheme under the canonical
//! (first-declaring) slot's stream key; parameter and integer-state payloads
//! are stored raw.

use std::collections::HashMap;

use crate::error::{ActError, Result};
use crate::quantizer::{
    compressed_size_bits, dequantize, payload_bits, quantize, CompressionScheme, QuantizedTensor,
};
use crate::numerics::{StreamKey, Tensor};
use crate::tape::graph::{SlotId, SlotInfo, SlotKind};

/// Identity of a stored tensor within one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Footprint {
    /// Producer token: value index in the forward chain, or a parameter tag.
    pub token: u64,
    pub len: usize,
    pub checksum: u64,
}

#[derive(Debug, Clone)]
pub enum Payload {
    Raw(Tensor),
    Quantized(QuantizedTensor),
    Mask(Vec<u8>),
    Indices(Vec<u32>),
    Labels(Vec<usize>),
}

impl Payload {
    fn len(&self) -> usize {
        match self {
            Payload::Raw(t) => t.len(),
            Payload::Quantized(q) => q.num_elements(),
            Payload::Mask(m) => m.len(),
            Payload::Indices(i) => i.len(),
            Payload::Labels(l) => l.len(),
        }
    }
}

#[derive(Debug, Clone)]
struct SlotEntry {
    info: SlotInfo,
    payload: usize,
    /// False when this slot aliased an existing payload.
    canonical: bool,
}

/// Ordered collection of saved-for-backward tensors, keyed by slot id.
#[derive(Debug, Clone)]
pub struct ContextStore {
    slots: Vec<Option<SlotEntry>>,
    payloads: Vec<Payload>,
    payload_kind: Vec<SlotKind>,
    by_footprint: HashMap<Footprint, usize>,
    scheme: CompressionScheme,
}

impl ContextStore {
    pub fn new(num_slots: usize, scheme: CompressionScheme) -> Self {
        ContextStore {
            slots: vec![None; num_slots],
            payloads: Vec::new(),
            payload_kind: Vec::new(),
            by_footprint: HashMap::new(),
            scheme,
        }
    }

    pub fn scheme(&self) -> &CompressionScheme {
        &self.scheme
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn has_slot(&self, slot: SlotId) -> bool {
        self.slots.get(slot).is_some_and(|s| s.is_some())
    }

    pub fn slot_info(&self, slot: SlotId) -> Result<&SlotInfo> {
        self.entry(slot).map(|e| &e.info)
    }

    /// True when `slot` shares another slot's payload.
    pub fn is_alias(&self, slot: SlotId) -> Result<bool> {
        self.entry(slot).map(|e| !e.canonical)
    }

    pub fn payload_index(&self, slot: SlotId) -> Result<usize> {
        self.entry(slot).map(|e| e.payload)
    }

    fn entry(&self, slot: SlotId) -> Result<&SlotEntry> {
        self.slots
            .get(slot)
            .and_then(|s| s.as_ref())
            .ok_or(ActError::MissingSlot(slot))
    }

    fn footprint_of(t: &Tensor, token: u64) -> Footprint {
        Footprint {
            token,
            len: t.len(),
            checksum: t.checksum64(),
        }
    }

    /// Stores an activation tensor for `info.id`, compressing it at the
    /// scheme's width for that slot. Returns true when it deduplicated onto
    /// an existing payload.
    pub fn insert_activation(
        &mut self,
        info: &SlotInfo,
        value: &Tensor,
        token: u64,
        key: StreamKey,
    ) -> Result<bool> {
        debug_assert_eq!(info.kind, SlotKind::Activation);
        let fp = Self::footprint_of(value, token);
        if let Some(&idx) = self.by_footprint.get(&fp) {
            self.slots[info.id] = Some(SlotEntry {
                info: info.clone(),
                payload: idx,
                canonical: false,
            });
            return Ok(true);
        }
        let bits = self.scheme.bits_for(info.id);
        let payload = if bits.is_full() {
            Payload::Raw(value.clone())
        } else {
            Payload::Quantized(quantize(value, bits, self.scheme.group_size(), key)?)
        };
        let idx = self.push_payload(payload, SlotKind::Activation, fp);
        self.slots[info.id] = Some(SlotEntry {
            info: info.clone(),
            payload: idx,
            canonical: true,
        });
        Ok(false)
    }

    /// Stores a parameter tensor raw; tied parameters dedup by footprint.
    pub fn insert_parameter(
        &mut self,
        info: &SlotInfo,
        value: &Tensor,
        token: u64,
    ) -> Result<bool> {
        debug_assert_eq!(info.kind, SlotKind::Parameter);
        let fp = Self::footprint_of(value, token);
        if let Some(&idx) = self.by_footprint.get(&fp) {
            self.slots[info.id] = Some(SlotEntry {
                info: info.clone(),
                payload: idx,
                canonical: false,
            });
            return Ok(true);
        }
        let idx = self.push_payload(Payload::Raw(value.clone()), SlotKind::Parameter, fp);
        self.slots[info.id] = Some(SlotEntry {
            info: info.clone(),
            payload: idx,
            canonical: true,
        });
        Ok(false)
    }

    pub fn insert_mask(&mut self, info: &SlotInfo, mask: Vec<u8>) {
        debug_assert_eq!(info.kind, SlotKind::IntState);
        let idx = self.payloads.len();
        self.payloads.push(Payload::Mask(mask));
        self.payload_kind.push(SlotKind::IntState);
        self.slots[info.id] = Some(SlotEntry {
            info: info.clone(),
            payload: idx,
            canonical: true,
        });
    }

    pub fn insert_indices(&mut self, info: &SlotInfo, indices: Vec<u32>) {
        debug_assert_eq!(info.kind, SlotKind::IntState);
        let idx = self.payloads.len();
        self.payloads.push(Payload::Indices(indices));
        self.payload_kind.push(SlotKind::IntState);
        self.slots[info.id] = Some(SlotEntry {
            info: info.clone(),
            payload: idx,
            canonical: true,
        });
    }

    pub fn insert_labels(&mut self, info: &SlotInfo, labels: Vec<usize>) {
        debug_assert_eq!(info.kind, SlotKind::IntState);
        let idx = self.payloads.len();
        self.payloads.push(Payload::Labels(labels));
        self.payload_kind.push(SlotKind::IntState);
        self.slots[info.id] = Some(SlotEntry {
            info: info.clone(),
            payload: idx,
            canonical: true,
        });
    }

    fn push_payload(&mut self, payload: Payload, kind: SlotKind, fp: Footprint) -> usize {
        let idx = self.payloads.len();
        self.payloads.push(payload);
        self.payload_kind.push(kind);
        self.by_footprint.insert(fp, idx);
        idx
    }

    /// The decompressed tensor behind an activation or parameter slot.
    pub fn fetch_tensor(&self, slot: SlotId) -> Result<Tensor> {
        let e = self.entry(slot)?;
        match &self.payloads[e.payload] {
            Payload::Raw(t) => Ok(t.clone()),
            Payload::Quantized(q) => dequantize(q),
            _ => Err(ActError::CorruptedPayload(format!(
                "slot {slot} holds integer state, not a tensor"
            ))),
        }
    }

    pub fn fetch_mask(&self, slot: SlotId) -> Result<&[u8]> {
        match &self.payloads[self.entry(slot)?.payload] {
            Payload::Mask(m) => Ok(m),
            _ => Err(ActError::CorruptedPayload(format!("slot {slot} is not a mask"))),
        }
    }

    pub fn fetch_indices(&self, slot: SlotId) -> Result<&[u32]> {
        match &self.payloads[self.entry(slot)?.payload] {
            Payload::Indices(i) => Ok(i),
            _ => Err(ActError::CorruptedPayload(format!(
                "slot {slot} is not an index payload"
            ))),
        }
    }

    pub fn fetch_labels(&self, slot: SlotId) -> Result<&[usize]> {
        match &self.payloads[self.entry(slot)?.payload] {
            Payload::Labels(l) => Ok(l),
            _ => Err(ActError::CorruptedPayload(format!(
                "slot {slot} is not a label payload"
            ))),
        }
    }

    /// Canonical activation slots: one `(slot, payload)` pair per distinct
    /// activation payload, in slot order. These are the units sensitivity
    /// estimation and bit allocation operate on.
    pub fn canonical_activation_slots(&self) -> Vec<(SlotId, usize)> {
        self.slots
            .iter()
            .flatten()
            .filter(|e| e.canonical && e.info.kind == SlotKind::Activation)
            .map(|e| (e.info.id, e.payload))
            .collect()
    }

    /// Summed `payload_bits` over distinct activation payloads, and the same
    /// storage at 32 bits per element. Integer state and parameters are
    /// excluded: they are not quantization targets.
    pub fn activation_storage_bits(&self) -> (u64, u64) {
        let mut compressed = 0u64;
        let mut full = 0u64;
        for (idx, p) in self.payloads.iter().enumerate() {
            if self.payload_kind[idx] != SlotKind::Activation {
                continue;
            }
            match p {
                Payload::Raw(t) => {
                    compressed += 32 * t.len() as u64;
                    full += 32 * t.len() as u64;
                }
                Payload::Quantized(q) => {
                    compressed += payload_bits(q);
                    full += 32 * q.num_elements() as u64;
                }
                _ => {}
            }
        }
        (compressed, full)
    }

    /// Exact serialized accounting (headers included) over distinct
    /// activation payloads.
    pub fn activation_file_bits(&self) -> u64 {
        self.payloads
            .iter()
            .enumerate()
            .filter(|(idx, _)| self.payload_kind[*idx] == SlotKind::Activation)
            .map(|(_, p)| match p {
                Payload::Quantized(q) => compressed_size_bits(q),
                Payload::Raw(t) => {
                    32 * t.len() as u64 + crate::quantizer::header_bits(t.rank())
                }
                _ => 0,
            })
            .sum()
    }

    /// Concatenated decompressed activation payloads, one per distinct
    /// payload in canonical slot order: the context vector `h`.
    pub fn activation_vector(&self) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for (slot, _) in self.canonical_activation_slots() {
            out.extend_from_slice(self.fetch_tensor(slot)?.data());
        }
        Ok(out)
    }

    /// A copy of this store whose activation payloads are replaced by raw
    /// tensors carved from `h` (same order and lengths as
    /// `activation_vector`). Used to evaluate the gradient at a perturbed
    /// context.
    pub fn with_activation_vector(&self, h: &[f64]) -> Result<ContextStore> {
        let mut out = self.clone();
        let mut off = 0usize;
        for (slot, payload_idx) in self.canonical_activation_slots() {
            let current = self.fetch_tensor(slot)?;
            let next = off + current.len();
            if next > h.len() {
                return Err(ActError::DataLength {
                    expected: next,
                    got: h.len(),
                });
            }
            let t = Tensor::new(
                current.shape().to_vec(),
                h[off..next].to_vec(),
                crate::numerics::Precision::Double,
            )?;
            out.payloads[payload_idx] = Payload::Raw(t);
            off = next;
        }
        if off != h.len() {
            return Err(ActError::DataLength {
                expected: off,
                got: h.len(),
            });
        }
        Ok(out)
    }

    /// Replaces one activation payload with a raw tensor (theory probes).
    pub fn replace_activation(&mut self, slot: SlotId, value: Tensor) -> Result<()> {
        let idx = self.payload_index(slot)?;
        if self.payload_kind[idx] != SlotKind::Activation {
            return Err(ActError::CorruptedPayload(format!(
                "slot {slot} is not an activation"
            )));
        }
        if value.len() != self.payloads[idx].len() {
            return Err(ActError::DataLength {
                expected: self.payloads[idx].len(),
                got: value.len(),
            });
        }
        self.payloads[idx] = Payload::Raw(value);
        Ok(())
    }
}
