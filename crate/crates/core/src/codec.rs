//! Canonical binary encoding.
//!
//! Every encoded message starts with a one-byte format tag, then the kind byte
//! and the sender, then kind-specific fields in declaration order. Integers are
//! fixed-width big-endian; byte strings and sequences carry a `u32` length
//! prefix. Decoding rejects unknown tags, truncation and trailing bytes, so the
//! encoding of a well-formed message is unique.

use thiserror::Error;

use crate::message::{AbaMessage, BinSet, Body, MessageKind, ProtocolMessage, VcbcId, VerifiableMessage};
use crate::tcrypto::{SignatureShare, ThresholdSignature};
use crate::types::{Batch, BatchError, ClientMessage, ReplicaId};

pub const FORMAT_TAG: u8 = 0x01;

/// Upper bound on any single length prefix, to keep hostile input from
/// triggering huge allocations.
const MAX_LEN: usize = 1 << 28;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("input truncated")]
    Truncated,
    #[error("unsupported format tag {0:#04x}")]
    FormatTag(u8),
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("{0} trailing bytes")]
    TrailingBytes(usize),
    #[error("invalid field: {0}")]
    Invalid(&'static str),
    #[error("invalid batch: {0}")]
    Batch(#[from] BatchError),
}

/// Append-only encoder.
#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer::default()
    }

    pub fn with_tag() -> Self {
        let mut w = Writer::new();
        w.u8(FORMAT_TAG);
        w
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn bool(&mut self, v: bool) -> &mut Self {
        self.u8(v as u8)
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.u32(v.len() as u32);
        self.buf.extend_from_slice(v);
        self
    }

    pub fn raw(&mut self, v: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }

    pub fn replica(&mut self, id: ReplicaId) -> &mut Self {
        self.u32(id.0)
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Cursor-based decoder.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn expect_tag(&mut self) -> Result<(), DecodeError> {
        match self.u8()? {
            FORMAT_TAG => Ok(()),
            t => Err(DecodeError::FormatTag(t)),
        }
    }

    fn take(&mut self, k: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(k).ok_or(DecodeError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(DecodeError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub fn bool(&mut self) -> Result<bool, DecodeError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(DecodeError::Invalid("bool")),
        }
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn len(&mut self) -> Result<usize, DecodeError> {
        let n = self.u32()? as usize;
        if n > MAX_LEN || n > self.remaining() {
            return Err(DecodeError::Truncated);
        }
        Ok(n)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], DecodeError> {
        let n = self.len()?;
        self.take(n)
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    pub fn replica(&mut self) -> Result<ReplicaId, DecodeError> {
        Ok(ReplicaId(self.u32()?))
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.remaining() == 0
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        match self.remaining() {
            0 => Ok(()),
            k => Err(DecodeError::TrailingBytes(k)),
        }
    }
}

/// Canonical encoding of batch entries (also the batch digest preimage).
pub(crate) fn put_entries(buf: &mut Vec<u8>, entries: &[ClientMessage]) {
    buf.extend_from_slice(&(entries.len() as u32).to_be_bytes());
    for e in entries {
        buf.extend_from_slice(&(e.payload().len() as u32).to_be_bytes());
        buf.extend_from_slice(e.payload());
    }
}

pub fn put_batch(w: &mut Writer, batch: &Batch) {
    let mut buf = Vec::new();
    put_entries(&mut buf, batch.entries());
    w.raw(&buf);
}

pub fn get_batch(r: &mut Reader<'_>) -> Result<Batch, DecodeError> {
    let count = r.u32()? as usize;
    // every entry needs at least its 4-byte length prefix
    if count > r.remaining() / 4 {
        return Err(DecodeError::Truncated);
    }
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        entries.push(ClientMessage::new(r.bytes()?.to_vec()));
    }
    Ok(Batch::new(entries)?)
}

fn put_vcbc_id(w: &mut Writer, id: &VcbcId) {
    w.replica(id.origin).u64(id.priority);
}

fn get_vcbc_id(r: &mut Reader<'_>) -> Result<VcbcId, DecodeError> {
    Ok(VcbcId { origin: r.replica()?, priority: r.u64()? })
}

fn put_share(w: &mut Writer, s: &SignatureShare) {
    w.replica(s.signer).bytes(&s.value);
}

fn get_share(r: &mut Reader<'_>) -> Result<SignatureShare, DecodeError> {
    Ok(SignatureShare { signer: r.replica()?, value: r.bytes()?.to_vec() })
}

pub fn put_verifiable(w: &mut Writer, m: &VerifiableMessage) {
    put_vcbc_id(w, &m.id);
    put_batch(w, &m.payload);
    w.bytes(&m.proof.value);
}

pub fn get_verifiable(r: &mut Reader<'_>) -> Result<VerifiableMessage, DecodeError> {
    let id = get_vcbc_id(r)?;
    let payload = get_batch(r)?;
    let proof = ThresholdSignature { value: r.bytes()?.to_vec() };
    Ok(VerifiableMessage { id, payload, proof })
}

pub fn encode(msg: &ProtocolMessage) -> Vec<u8> {
    let mut w = Writer::with_tag();
    w.u8(msg.kind() as u8).replica(msg.sender);
    match &msg.body {
        Body::VcbcSend { id, payload } => {
            put_vcbc_id(&mut w, id);
            put_batch(&mut w, payload);
        }
        Body::VcbcEchoShare { id, share } => {
            put_vcbc_id(&mut w, id);
            put_share(&mut w, share);
        }
        Body::VcbcFinal(m) => put_verifiable(&mut w, m),
        Body::Aba { round, msg } => {
            w.u64(*round);
            match msg {
                AbaMessage::Bval { internal, value } | AbaMessage::Aux { internal, value } => {
                    w.u32(*internal).bool(*value);
                }
                AbaMessage::Conf { internal, values } => {
                    w.u32(*internal).u8(values.mask());
                }
                AbaMessage::CoinShare { internal, share } => {
                    w.u32(*internal);
                    put_share(&mut w, share);
                }
                AbaMessage::Finish { value } => {
                    w.bool(*value);
                }
            }
        }
        Body::FillGap { queue, slot } => {
            w.replica(*queue).u64(*slot);
        }
        Body::Filler { queue, entries } => {
            w.replica(*queue).u32(entries.len() as u32);
            for e in entries {
                put_verifiable(&mut w, e);
            }
        }
    }
    w.finish()
}

pub fn decode(bytes: &[u8]) -> Result<ProtocolMessage, DecodeError> {
    let mut r = Reader::new(bytes);
    r.expect_tag()?;
    let kind_byte = r.u8()?;
    let kind = MessageKind::from_u8(kind_byte).ok_or(DecodeError::UnknownKind(kind_byte))?;
    let sender = r.replica()?;
    let body = match kind {
        MessageKind::VcbcSend => Body::VcbcSend { id: get_vcbc_id(&mut r)?, payload: get_batch(&mut r)? },
        MessageKind::VcbcEchoShare => Body::VcbcEchoShare { id: get_vcbc_id(&mut r)?, share: get_share(&mut r)? },
        MessageKind::VcbcFinal => Body::VcbcFinal(get_verifiable(&mut r)?),
        MessageKind::AbaBval
        | MessageKind::AbaAux
        | MessageKind::AbaConf
        | MessageKind::AbaCoinShare
        | MessageKind::AbaFinish => {
            let round = r.u64()?;
            let msg = match kind {
                MessageKind::AbaBval => AbaMessage::Bval { internal: r.u32()?, value: r.bool()? },
                MessageKind::AbaAux => AbaMessage::Aux { internal: r.u32()?, value: r.bool()? },
                MessageKind::AbaConf => {
                    let internal = r.u32()?;
                    let values = BinSet::from_mask(r.u8()?).ok_or(DecodeError::Invalid("bin set"))?;
                    AbaMessage::Conf { internal, values }
                }
                MessageKind::AbaCoinShare => AbaMessage::CoinShare { internal: r.u32()?, share: get_share(&mut r)? },
                _ => AbaMessage::Finish { value: r.bool()? },
            };
            Body::Aba { round, msg }
        }
        MessageKind::FillGap => Body::FillGap { queue: r.replica()?, slot: r.u64()? },
        MessageKind::Filler => {
            let queue = r.replica()?;
            let count = r.u32()? as usize;
            if count > r.remaining() {
                return Err(DecodeError::Truncated);
            }
            let mut entries = Vec::with_capacity(count);
            for _ in 0..count {
                entries.push(get_verifiable(&mut r)?);
            }
            Body::Filler { queue, entries }
        }
    };
    r.finish()?;
    Ok(ProtocolMessage { sender, body })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(items: &[&str]) -> Batch {
        Batch::new(items.iter().map(|s| ClientMessage::new(s.as_bytes().to_vec())).collect()).unwrap()
    }

    #[test]
    fn send_round_trip() {
        let m = ProtocolMessage::new(
            ReplicaId(2),
            Body::VcbcSend { id: VcbcId { origin: ReplicaId(2), priority: 9 }, payload: batch(&["tx"]) },
        );
        assert_eq!(decode(&encode(&m)).unwrap(), m);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert_eq!(decode(&[]), Err(DecodeError::Truncated));
    }

    #[test]
    fn fill_gap_encoding_is_deterministic() {
        let m = ProtocolMessage::new(ReplicaId(1), Body::FillGap { queue: ReplicaId(3), slot: 4 });
        let a = encode(&m);
        assert_eq!(a, encode(&m));
        assert_eq!(a, [1, 9, 0, 0, 0, 1, 0, 0, 0, 3, 0, 0, 0, 0, 0, 0, 0, 4]);
    }

    #[test]
    fn rejects_bad_framing() {
        let m = ProtocolMessage::new(ReplicaId(1), Body::FillGap { queue: ReplicaId(3), slot: 4 });
        let bytes = encode(&m);
        let mut wrong_tag = bytes.clone();
        wrong_tag[0] = 7;
        assert_eq!(decode(&wrong_tag), Err(DecodeError::FormatTag(7)));
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert_eq!(decode(&trailing), Err(DecodeError::TrailingBytes(1)));
        for cut in 0..bytes.len() {
            assert!(decode(&bytes[..cut]).is_err());
        }
        let mut kind = bytes;
        kind[1] = 42;
        assert_eq!(decode(&kind), Err(DecodeError::UnknownKind(42)));
    }

    #[test]
    fn rejects_empty_and_duplicate_batches() {
        let mut w = Writer::with_tag();
        w.u8(MessageKind::VcbcSend as u8).u32(0).u32(0).u64(0).u32(0);
        assert_eq!(decode(&w.finish()), Err(DecodeError::Batch(BatchError::Empty)));
        let mut w = Writer::with_tag();
        w.u8(MessageKind::VcbcSend as u8).u32(0).u32(0).u64(0).u32(2).bytes(b"a").bytes(b"a");
        assert!(matches!(decode(&w.finish()), Err(DecodeError::Batch(BatchError::Duplicate(_)))));
    }

    #[test]
    fn huge_length_prefix_does_not_allocate() {
        let mut w = Writer::with_tag();
        w.u8(MessageKind::Filler as u8).u32(0).u32(0).u32(u32::MAX);
        assert_eq!(decode(&w.finish()), Err(DecodeError::Truncated));
    }
}
