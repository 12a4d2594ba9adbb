//! Exact parsing of human-written counts: `8000000000`, `8B`, `204,800M`,
//! `1.5K`, `8e9`. Values must be whole numbers that fit in `u64`.

const SUFFIXES: &[(char, u32)] = &[('K', 3), ('M', 6), ('B', 9), ('G', 9), ('T', 12)];

pub fn parse_count(raw: &str) -> Result<u64, String> {
    let err = || format!("invalid count {raw:?}");
    let s: String = raw.trim().chars().filter(|&c| c != '_' && c != ',').collect();
    if s.is_empty() {
        return Err(err());
    }

    let (mantissa, mut exp) = match s.char_indices().last() {
        Some((i, c)) if c.is_ascii_alphabetic() && !c.eq_ignore_ascii_case(&'e') => {
            let up = c.to_ascii_uppercase();
            let (_, e) = SUFFIXES.iter().find(|(k, _)| *k == up).ok_or_else(err)?;
            (&s[..i], *e as i64)
        }
        _ => match s.find(['e', 'E']) {
            Some(i) => (&s[..i], s[i + 1..].parse::<i64>().map_err(|_| err())?),
            None => (s.as_str(), 0),
        },
    };

    let (int, frac) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    if int.is_empty() && frac.is_empty() || !(int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit())) {
        return Err(err());
    }
    let mut digits: String = format!("{int}{frac}");
    exp -= frac.len() as i64;
    // Drop trailing zeros that only carry a negative exponent.
    while exp < 0 && digits.ends_with('0') {
        digits.pop();
        exp += 1;
    }
    if exp < 0 {
        return Err(format!("count {raw:?} is not a whole number"));
    }
    let mut value: u128 = if digits.is_empty() {
        0
    } else {
        digits.parse().map_err(|_| err())?
    };
    if value == 0 {
        return Ok(0);
    }
    for _ in 0..exp {
        value = value.checked_mul(10).ok_or_else(err)?;
        if value > u64::MAX as u128 {
            return Err(format!("count {raw:?} is too large"));
        }
    }
    u64::try_from(value).map_err(|_| format!("count {raw:?} is too large"))
}

#[cfg(test)]
mod tests {
    use super::parse_count;

    #[test]
    fn forms() {
        for (s, v) in [
            ("0", 0),
            ("5", 5),
            ("8B", 8_000_000_000),
            ("8b", 8_000_000_000),
            ("8e9", 8_000_000_000),
            ("8E9", 8_000_000_000),
            ("100M", 100_000_000),
            ("204800M", 204_800_000_000),
            ("204,800M", 204_800_000_000),
            ("25_000_000", 25_000_000),
            ("1.5K", 1_500),
            ("2.048e11", 204_800_000_000),
            ("8192", 8192),
            ("10T", 10_000_000_000_000),
            ("1.50K", 1_500),
            ("3.0", 3),
            ("0e999999999", 0),
        ] {
            assert_eq!(parse_count(s), Ok(v), "{s}");
        }
    }

    #[test]
    fn rejects() {
        for s in [
            "",
            "x",
            "1.5",
            "8Q",
            "-1",
            "1e-3",
            "1e30",
            "99999999999999999999",
            "1..2",
            "B",
            ".",
        ] {
            assert!(parse_count(s).is_err(), "{s}");
        }
    }
}
