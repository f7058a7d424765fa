//! Binary index snapshot of a [`KnowledgeGraph`].
//!
//! Layout (little-endian): 8-byte magic, `u32` version, entity labels,
//! relation labels, then `u64` triple count and `3 × u32` per triple. Labels
//! are a `u32` count followed by `u32`-length-prefixed UTF-8 strings. The
//! indices are rebuilt on read.

use std::io::{Read, Write};

use super::{EntityId, KgError, KnowledgeGraph, RelationId, TripleId};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"KGCIDX\0\0";
pub const SNAPSHOT_VERSION: u32 = 1;

pub fn write_snapshot<W: Write>(kg: &KnowledgeGraph, mut out: W) -> Result<(), KgError> {
    out.write_all(SNAPSHOT_MAGIC)?;
    out.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
    write_labels(&mut out, &kg.entities)?;
    write_labels(&mut out, &kg.relations)?;
    out.write_all(&(kg.triples.len() as u64).to_le_bytes())?;
    for t in &kg.triples {
        out.write_all(&t.head.0.to_le_bytes())?;
        out.write_all(&t.relation.0.to_le_bytes())?;
        out.write_all(&t.tail.0.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_snapshot<R: Read>(mut input: R) -> Result<KnowledgeGraph, KgError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(KgError::Snapshot("bad magic".into()));
    }
    let version = read_u32(&mut input)?;
    if version != SNAPSHOT_VERSION {
        return Err(KgError::Snapshot(format!(
            "unsupported version {version}, expected {SNAPSHOT_VERSION}"
        )));
    }
    let entities = read_labels(&mut input)?;
    let relations = read_labels(&mut input)?;
    if !is_strictly_sorted(&entities) || !is_strictly_sorted(&relations) {
        return Err(KgError::Snapshot("labels are not sorted".into()));
    }
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    let count = u64::from_le_bytes(buf) as usize;
    let mut triples = Vec::with_capacity(count.min(1 << 24));
    for _ in 0..count {
        let h = read_u32(&mut input)?;
        let r = read_u32(&mut input)?;
        let t = read_u32(&mut input)?;
        if h as usize >= entities.len() || t as usize >= entities.len() || r as usize >= relations.len()
        {
            return Err(KgError::Snapshot("triple id out of range".into()));
        }
        triples.push(TripleId {
            head: EntityId(h),
            relation: RelationId(r),
            tail: EntityId(t),
        });
    }
    Ok(KnowledgeGraph::from_parts(entities, relations, triples))
}

fn is_strictly_sorted(labels: &[String]) -> bool {
    labels.windows(2).all(|w| w[0] < w[1])
}

fn write_labels<W: Write>(out: &mut W, labels: &[String]) -> Result<(), KgError> {
    out.write_all(&(labels.len() as u32).to_le_bytes())?;
    for l in labels {
        out.write_all(&(l.len() as u32).to_le_bytes())?;
        out.write_all(l.as_bytes())?;
    }
    Ok(())
}

fn read_labels<R: Read>(input: &mut R) -> Result<Vec<String>, KgError> {
    let n = read_u32(input)? as usize;
    let mut labels = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        let len = read_u32(input)? as usize;
        let mut bytes = vec![0u8; len];
        input.read_exact(&mut bytes)?;
        labels.push(String::from_utf8(bytes).map_err(|e| KgError::Snapshot(e.to_string()))?);
    }
    Ok(labels)
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32, KgError> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::load_kg;

    #[test]
    fn snapshot_round_trip() {
        let kg = load_kg("A\tr\tB\nB\ts\tC\nC\tbirthPlace\tA\n".as_bytes()).unwrap();
        let mut bytes = Vec::new();
        write_snapshot(&kg, &mut bytes).unwrap();
        assert_eq!(&bytes[..8], SNAPSHOT_MAGIC);
        let back = read_snapshot(bytes.as_slice()).unwrap();
        assert_eq!(back, kg);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        assert!(matches!(
            read_snapshot(&b"NOTANIDX\x01\0\0\0"[..]),
            Err(KgError::Snapshot(_))
        ));
        let mut bytes = SNAPSHOT_MAGIC.to_vec();
        bytes.extend_from_slice(&99u32.to_le_bytes());
        assert!(matches!(read_snapshot(bytes.as_slice()), Err(KgError::Snapshot(_))));
    }
}
