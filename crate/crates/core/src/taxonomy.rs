//! Four-level forgery taxonomy: authenticity, forgery type, generator family
//! and the concrete generator.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Authenticity {
    Real,
    Fake,
}

/// Level-2 forgery type.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ForgeryType {
    /// Entire face synthesis.
    Efs,
    /// Attribute manipulation.
    Am,
    /// Face swap.
    Fs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Diffusion,
    Gan,
}

/// Generators of the reference taxonomy, with their type and family.
pub const KNOWN_GENERATORS: [(ForgeryType, Family, &str); 9] = [
    (ForgeryType::Efs, Family::Diffusion, "DDPM"),
    (ForgeryType::Efs, Family::Diffusion, "LatDiff"),
    (ForgeryType::Efs, Family::Diffusion, "CollDiff"),
    (ForgeryType::Am, Family::Diffusion, "Diffae"),
    (ForgeryType::Am, Family::Gan, "LatTrans"),
    (ForgeryType::Am, Family::Gan, "IAFaces"),
    (ForgeryType::Fs, Family::Diffusion, "DiffFace"),
    (ForgeryType::Fs, Family::Gan, "FSLSD"),
    (ForgeryType::Fs, Family::Gan, "FaceSwapper"),
];

/// Hierarchical label. Construct through [`HierLabel::new`], [`HierLabel::real`]
/// or parsing; every path enforces the nesting rules.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HierLabel {
    authenticity: Authenticity,
    forgery_type: Option<ForgeryType>,
    family: Option<Family>,
    generator: Option<String>,
}

impl HierLabel {
    pub fn real() -> Self {
        Self {
            authenticity: Authenticity::Real,
            forgery_type: None,
            family: None,
            generator: None,
        }
    }

    pub fn new(
        authenticity: Authenticity,
        forgery_type: Option<ForgeryType>,
        family: Option<Family>,
        generator: Option<String>,
    ) -> Result<Self, String> {
        if authenticity == Authenticity::Real
            && (forgery_type.is_some() || family.is_some() || generator.is_some())
        {
            return Err("real label must not carry forgery type, family or generator".into());
        }
        if family.is_some() && forgery_type.is_none() {
            return Err("family given without forgery type".into());
        }
        if generator.is_some() && family.is_none() {
            return Err("generator given without family".into());
        }
        if let Some(g) = &generator {
            if g.trim().is_empty() || g.contains('\t') {
                return Err(format!("invalid generator name {g:?}"));
            }
        }
        Ok(Self {
            authenticity,
            forgery_type,
            family,
            generator,
        })
    }

    /// Fully specified fake label for a known generator name.
    pub fn for_generator(name: &str) -> Option<Self> {
        KNOWN_GENERATORS
            .iter()
            .find(|(_, _, g)| *g == name)
            .map(|&(t, f, g)| Self {
                authenticity: Authenticity::Fake,
                forgery_type: Some(t),
                family: Some(f),
                generator: Some(g.to_string()),
            })
    }

    pub fn authenticity(&self) -> Authenticity {
        self.authenticity
    }

    pub fn is_fake(&self) -> bool {
        self.authenticity == Authenticity::Fake
    }

    pub fn forgery_type(&self) -> Option<ForgeryType> {
        self.forgery_type
    }

    pub fn family(&self) -> Option<Family> {
        self.family
    }

    pub fn generator(&self) -> Option<&str> {
        self.generator.as_deref()
    }

    pub fn one_hot(&self) -> OneHotLabel {
        OneHotLabel::from_authenticity(self.authenticity)
    }

    /// Parses the four label columns of a manifest record (`-` marks absence).
    pub fn from_fields(fields: [&str; 4]) -> Result<Self, String> {
        fn opt(s: &str) -> Option<&str> {
            (s != "-").then_some(s)
        }
        let authenticity = fields[0].parse::<Authenticity>()?;
        let forgery_type = opt(fields[1]).map(str::parse::<ForgeryType>).transpose()?;
        let family = opt(fields[2]).map(str::parse::<Family>).transpose()?;
        let generator = opt(fields[3]).map(str::to_string);
        Self::new(authenticity, forgery_type, family, generator)
    }

    pub fn to_fields(&self) -> [String; 4] {
        [
            self.authenticity.to_string(),
            self.forgery_type.map_or("-".into(), |t| t.to_string()),
            self.family.map_or("-".into(), |f| f.to_string()),
            self.generator.clone().unwrap_or_else(|| "-".into()),
        ]
    }
}

impl fmt::Display for HierLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.authenticity)?;
        if let Some(t) = self.forgery_type {
            write!(f, ",{t}")?;
        }
        if let Some(fam) = self.family {
            write!(f, ",{fam}")?;
        }
        if let Some(g) = &self.generator {
            write!(f, ",{g}")?;
        }
        Ok(())
    }
}

/// Parses the comma-separated short form used on the command line,
/// e.g. `fake,FS,diffusion,DiffFace` or `real`.
impl FromStr for HierLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() > 4 {
            return Err(Error::Label {
                entry: s.into(),
                msg: "at most four comma-separated levels".into(),
            });
        }
        let mut fields = ["-"; 4];
        for (slot, p) in fields.iter_mut().zip(&parts) {
            *slot = p;
        }
        HierLabel::from_fields(fields).map_err(|msg| Error::Label {
            entry: s.into(),
            msg,
        })
    }
}

impl FromStr for Authenticity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "real" => Ok(Self::Real),
            "fake" => Ok(Self::Fake),
            _ => Err(format!("unknown authenticity {s:?}")),
        }
    }
}

impl FromStr for ForgeryType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "EFS" => Ok(Self::Efs),
            "AM" => Ok(Self::Am),
            "FS" => Ok(Self::Fs),
            _ => Err(format!("unknown forgery type {s:?}")),
        }
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "diffusion" => Ok(Self::Diffusion),
            "gan" => Ok(Self::Gan),
            _ => Err(format!("unknown generator family {s:?}")),
        }
    }
}

impl fmt::Display for Authenticity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Real => "real",
            Self::Fake => "fake",
        })
    }
}

impl fmt::Display for ForgeryType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Efs => "EFS",
            Self::Am => "AM",
            Self::Fs => "FS",
        })
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Diffusion => "diffusion",
            Self::Gan => "GAN",
        })
    }
}

/// Two-class target: real is `[1, 0]`, fake is `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OneHotLabel([u8; 2]);

impl OneHotLabel {
    pub const REAL: Self = Self([1, 0]);
    pub const FAKE: Self = Self([0, 1]);

    pub fn from_authenticity(a: Authenticity) -> Self {
        match a {
            Authenticity::Real => Self::REAL,
            Authenticity::Fake => Self::FAKE,
        }
    }

    pub fn class_index(self) -> usize {
        if self == Self::FAKE {
            1
        } else {
            0
        }
    }

    pub fn as_f64(self) -> [f64; 2] {
        [self.0[0] as f64, self.0[1] as f64]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_short_form() {
        let l: HierLabel = "fake,FS,diffusion,DiffFace".parse().unwrap();
        assert_eq!(l.forgery_type(), Some(ForgeryType::Fs));
        assert_eq!(l.family(), Some(Family::Diffusion));
        assert_eq!(l.generator(), Some("DiffFace"));
        assert_eq!(l.to_string(), "fake,FS,diffusion,DiffFace");
        assert_eq!("real".parse::<HierLabel>().unwrap(), HierLabel::real());
    }

    #[test]
    fn rejects_broken_nesting() {
        assert!("fake,-,-,DDPM".parse::<HierLabel>().is_err());
        assert!("fake,-,GAN".parse::<HierLabel>().is_err());
        assert!("real,EFS".parse::<HierLabel>().is_err());
        assert!("fake,EFS".parse::<HierLabel>().is_ok());
    }

    #[test]
    fn one_hot_has_single_one() {
        for l in [OneHotLabel::REAL, OneHotLabel::FAKE] {
            assert_eq!(l.0.iter().map(|&v| v as u32).sum::<u32>(), 1);
        }
        assert_eq!(HierLabel::for_generator("IAFaces").unwrap().one_hot().class_index(), 1);
    }

    fn arb_fields() -> impl Strategy<Value = (bool, Option<u8>, Option<bool>, Option<String>)> {
        (
            any::<bool>(),
            proptest::option::of(0u8..3),
            proptest::option::of(any::<bool>()),
            proptest::option::of("[A-Za-z]{1,8}"),
        )
    }

    proptest! {
        #[test]
        fn nesting_is_enforced((fake, t, f, g) in arb_fields()) {
            let a = if fake { Authenticity::Fake } else { Authenticity::Real };
            let t = t.map(|i| [ForgeryType::Efs, ForgeryType::Am, ForgeryType::Fs][i as usize]);
            let f = f.map(|d| if d { Family::Diffusion } else { Family::Gan });
            let valid = (fake || (t.is_none() && f.is_none() && g.is_none()))
                && (f.is_none() || t.is_some())
                && (g.is_none() || f.is_some());
            let built = HierLabel::new(a, t, f, g.clone());
            prop_assert_eq!(built.is_ok(), valid);
            if let Ok(l) = built {
                let fields = l.to_fields();
                let back = HierLabel::from_fields([&fields[0], &fields[1], &fields[2], &fields[3]]).unwrap();
                prop_assert_eq!(back, l);
            }
        }
    }
}
