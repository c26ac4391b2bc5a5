//! `.vpyr` container: "VPYR", version, level count, then each level as a
//! length-prefixed `.vgrid` payload (level 0 first).

use scatterfield_core::volume::{DensityGrid, DensityPyramid, GridError};
use std::path::Path;

pub const VPYR_MAGIC: &[u8; 4] = b"VPYR";
pub const VPYR_VERSION: u32 = 1;

pub fn to_bytes(pyramid: &DensityPyramid) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(VPYR_MAGIC);
    out.extend_from_slice(&VPYR_VERSION.to_le_bytes());
    out.extend_from_slice(&(pyramid.len() as u32).to_le_bytes());
    for level in pyramid.levels() {
        let bytes = level.to_bytes();
        out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&bytes);
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<DensityPyramid, GridError> {
    let bad = |m: &str| GridError::MalformedHeader(format!("pyramid: {m}"));
    let take = |r: &mut &[u8], n: usize| -> Result<Vec<u8>, GridError> {
        if r.len() < n {
            return Err(GridError::Truncated {
                expected: n,
                actual: r.len(),
            });
        }
        let (head, tail) = r.split_at(n);
        *r = tail;
        Ok(head.to_vec())
    };
    let mut r = bytes;
    if take(&mut r, 4)? != VPYR_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(take(&mut r, 4)?.try_into().unwrap());
    if version != VPYR_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut r, 4)?.try_into().unwrap()) as usize;
    if count == 0 || count > 32 {
        return Err(bad(&format!("{count} levels")));
    }
    let mut levels = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u64::from_le_bytes(take(&mut r, 8)?.try_into().unwrap()) as usize;
        levels.push(DensityGrid::from_bytes(&take(&mut r, len)?)?);
    }
    if !r.is_empty() {
        return Err(GridError::TrailingBytes(r.len()));
    }
    DensityPyramid::from_levels(levels)
}

pub fn save(pyramid: &DensityPyramid, path: &Path) -> Result<(), GridError> {
    std::fs::write(path, to_bytes(pyramid))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<DensityPyramid, GridError> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use scatterfield_core::volume::build_pyramid;
    use scatterfield_core::Vec3;

    #[test]
    fn round_trip_and_corruption() {
        let g = DensityGrid::from_fn([8; 3], 0.125, Vec3::zeros(), |c| (c.x * c.y) as f32).unwrap();
        let p = build_pyramid(&g).unwrap();
        let bytes = to_bytes(&p);
        assert_eq!(from_bytes(&bytes).unwrap().levels(), p.levels());
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            from_bytes(&extra),
            Err(GridError::TrailingBytes(1))
        ));
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x40;
        assert!(from_bytes(&flipped).is_err());
    }
}
