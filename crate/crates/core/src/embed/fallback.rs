/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Signed character 3-gram hashing into `dim` buckets, L2-normalized.
///
/// Input is lowercased and whitespace-collapsed first. A non-empty string
/// shorter than three characters hashes as a single gram; an empty string or
/// an accumulator that cancels to zero yields `e₀`.
pub fn fallback_embed(text: &str, dim: usize) -> Vec<f32> {
    assert!(dim > 0, "embedding dimension must be positive");
    let normalized = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    let chars: Vec<char> = normalized.chars().collect();
    let mut acc = vec![0.0f64; dim];
    let mut add = |gram: &[char]| {
        let s: String = gram.iter().collect();
        let h = fnv1a64(s.as_bytes());
        let idx = (h % dim as u64) as usize;
        acc[idx] += if h >> 63 == 0 { 1.0 } else { -1.0 };
    };
    if chars.len() >= 3 {
        chars.windows(3).for_each(&mut add);
    } else if !chars.is_empty() {
        add(&chars);
    }
    let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        let mut e0 = vec![0.0f32; dim];
        e0[0] = 1.0;
        return e0;
    }
    acc.iter().map(|v| (v / norm) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn empty_is_reserved_basis_vector() {
        let e = fallback_embed("", 384);
        assert_eq!(e[0], 1.0);
        assert!(e[1..].iter().all(|&v| v == 0.0));
        assert_eq!(fallback_embed("   ", 384), e);
    }

    #[test]
    fn unit_norm_and_deterministic() {
        for t in ["price", "a", "Zürich Hauptbahnhof", "x y  z"] {
            let e = fallback_embed(t, 384);
            let n: f64 = e.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6, "{t}: {n}");
            assert_eq!(e, fallback_embed(t, 384));
        }
        assert_eq!(fallback_embed("Hello   World", 64), fallback_embed("hello world", 64));
    }

    #[test]
    fn shared_grams_raise_similarity() {
        let abc = fallback_embed("abc", 384);
        let abd = fallback_embed("abd", 384);
        assert!(cos(&abc, &abd) < 1.0);

        // "night" has grams {nig, igh, ght}; "nights" adds "hts". With no
        // bucket collisions cos = 3 / (sqrt(3) * sqrt(4)) = 0.866.
        // "zzzz" has grams {zzz, zzz}, none shared, so cos is 0 barring collisions.
        let night = fallback_embed("night", 384);
        let nights = fallback_embed("nights", 384);
        let zzzz = fallback_embed("zzzz", 384);
        let expected = 3.0 / (3f64.sqrt() * 2.0);
        assert!((cos(&night, &nights) - expected).abs() < 1e-6);
        assert!(cos(&night, &nights) > cos(&night, &zzzz));
    }
}
