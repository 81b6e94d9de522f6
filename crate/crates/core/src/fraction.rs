use std::fmt;
use std::str::FromStr;

/// Exact positive rational, used for the compression fractions `f1` and `f2`
/// so that `s = c_in * f1` and `m = c_out * f2` never go through a float.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Fraction {
    num: u32,
    den: u32,
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Fraction {
    pub const ONE: Fraction = Fraction { num: 1, den: 1 };

    /// Reduced fraction; `None` for a zero numerator or denominator.
    pub fn new(num: u32, den: u32) -> Option<Self> {
        if num == 0 || den == 0 {
            return None;
        }
        let g = gcd(num, den);
        Some(Self {
            num: num / g,
            den: den / g,
        })
    }

    pub fn numer(self) -> u32 {
        self.num
    }

    pub fn denom(self) -> u32 {
        self.den
    }

    /// `count * self` if it is an integer.
    pub fn scale(self, count: usize) -> Option<usize> {
        let prod = count as u64 * self.num as u64;
        (prod % self.den as u64 == 0).then(|| (prod / self.den as u64) as usize)
    }

    pub fn to_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseFractionError(pub String);

impl fmt::Display for ParseFractionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "expected a positive fraction like `1/4` or `1`, got `{}`", self.0)
    }
}

impl std::error::Error for ParseFractionError {}

impl FromStr for Fraction {
    type Err = ParseFractionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseFractionError(s.to_string());
        let t = s.trim();
        let (n, d) = match t.split_once('/') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (t, "1"),
        };
        let num: u32 = n.parse().map_err(|_| err())?;
        let den: u32 = d.parse().map_err(|_| err())?;
        Fraction::new(num, den).ok_or_else(err)
    }
}
