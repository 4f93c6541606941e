//! Swiss mandatory-insurance plan menu, cost-sharing rule and premium data.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarketError {
    #[error("deductible {0} CHF is not on the menu (300, 500, 1000, 1500, 2000, 2500)")]
    OffMenuDeductible(i64),
    #[error("annual spending must be non-negative, got {0}")]
    NegativeSpend(Chf),
    #[error("unknown {kind} code {code:?}")]
    UnknownCode { kind: &'static str, code: String },
    #[error("invalid CHF amount {0:?}")]
    InvalidAmount(String),
    #[error("no premium rows for {0}")]
    EmptyCell(PremiumCell),
    #[error("premium csv line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("premium csv line {line}: duplicate entry for {cell} insurer {insurer}")]
    Duplicate { line: usize, cell: PremiumCell, insurer: String },
    #[error("premium csv: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, MarketError>;

/// Swiss francs held as integer centimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Chf(i64);

impl Chf {
    pub const ZERO: Chf = Chf(0);

    pub const fn from_cents(cents: i64) -> Self {
        Chf(cents)
    }

    pub const fn from_francs(francs: i64) -> Self {
        Chf(francs * 100)
    }

    /// Rounds to the nearest centime.
    pub fn from_f64(francs: f64) -> Self {
        Chf((francs * 100.0).round() as i64)
    }

    pub fn cents(self) -> i64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 100.0
    }
}

impl std::ops::Add for Chf {
    type Output = Chf;
    fn add(self, rhs: Chf) -> Chf {
        Chf(self.0 + rhs.0)
    }
}

impl std::ops::Sub for Chf {
    type Output = Chf;
    fn sub(self, rhs: Chf) -> Chf {
        Chf(self.0 - rhs.0)
    }
}

impl fmt::Display for Chf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        write!(f, "{sign}{}.{:02}", abs / 100, abs % 100)
    }
}

impl FromStr for Chf {
    type Err = MarketError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || MarketError::InvalidAmount(s.to_string());
        let t = s.trim();
        let (neg, t) = match t.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, t),
        };
        let (whole, frac) = match t.split_once('.') {
            Some((w, f)) => (w, f),
            None => (t, ""),
        };
        if whole.is_empty() || !whole.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        if frac.len() > 2 || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let francs: i64 = whole.parse().map_err(|_| bad())?;
        let mut cents: i64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| bad())? };
        if frac.len() == 1 {
            cents *= 10;
        }
        let total = francs.checked_mul(100).and_then(|v| v.checked_add(cents)).ok_or_else(bad)?;
        Ok(Chf(if neg { -total } else { total }))
    }
}

/// Annual deductible; only the six regulated levels are representable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Deductible(u16);

impl Deductible {
    pub const MENU: [u16; 6] = [300, 500, 1000, 1500, 2000, 2500];
    pub const LOWEST: Deductible = Deductible(300);
    pub const HIGHEST: Deductible = Deductible(2500);

    pub fn new(chf: i64) -> Result<Self> {
        Self::MENU
            .iter()
            .find(|&&d| d as i64 == chf)
            .map(|&d| Deductible(d))
            .ok_or(MarketError::OffMenuDeductible(chf))
    }

    pub fn all() -> impl Iterator<Item = Deductible> {
        Self::MENU.iter().map(|&d| Deductible(d))
    }

    pub fn francs(self) -> i64 {
        self.0 as i64
    }

    pub fn amount(self) -> Chf {
        Chf::from_francs(self.0 as i64)
    }
}

impl fmt::Display for Deductible {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The 26 cantons, ordered alphabetically by their two-letter code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Canton(u8);

impl Canton {
    pub const CODES: [&'static str; 26] = [
        "AG", "AI", "AR", "BE", "BL", "BS", "FR", "GE", "GL", "GR", "JU", "LU", "NE", "NW", "OW", "SG", "SH", "SO",
        "SZ", "TG", "TI", "UR", "VD", "VS", "ZG", "ZH",
    ];
    pub const COUNT: usize = 26;

    pub fn from_index(i: usize) -> Option<Self> {
        (i < Self::COUNT).then_some(Canton(i as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn code(self) -> &'static str {
        Self::CODES[self.0 as usize]
    }

    pub fn all() -> impl Iterator<Item = Canton> {
        (0..Self::COUNT as u8).map(Canton)
    }
}

impl FromStr for Canton {
    type Err = MarketError;
    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase();
        Self::CODES
            .iter()
            .position(|&c| c == up)
            .map(|i| Canton(i as u8))
            .ok_or_else(|| MarketError::UnknownCode { kind: "canton", code: s.to_string() })
    }
}

impl fmt::Display for Canton {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AgeGroup {
    Child,
    YoungAdult,
    Adult,
}

impl AgeGroup {
    pub fn code(self) -> &'static str {
        match self {
            AgeGroup::Child => "child",
            AgeGroup::YoungAdult => "young_adult",
            AgeGroup::Adult => "adult",
        }
    }
}

impl FromStr for AgeGroup {
    type Err = MarketError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "child" => Ok(AgeGroup::Child),
            "young_adult" => Ok(AgeGroup::YoungAdult),
            "adult" => Ok(AgeGroup::Adult),
            other => Err(MarketError::UnknownCode { kind: "age group", code: other.to_string() }),
        }
    }
}

/// Free provider choice or any managed-care variant (family doctor,
/// telemedicine, HMO).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PlanType {
    Free,
    Managed,
}

impl PlanType {
    pub fn code(self) -> &'static str {
        match self {
            PlanType::Free => "free",
            PlanType::Managed => "managed",
        }
    }
}

impl FromStr for PlanType {
    type Err = MarketError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "free" => Ok(PlanType::Free),
            "managed" => Ok(PlanType::Managed),
            other => Err(MarketError::UnknownCode { kind: "plan type", code: other.to_string() }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PlanSpec {
    pub deductible: Deductible,
    pub plan_type: PlanType,
    pub age_group: AgeGroup,
    pub canton: Canton,
}

/// Everyone pays 10% of costs above the deductible, capped at 700 CHF.
pub const COINSURANCE_RATE_PERCENT: i64 = 10;
pub const COINSURANCE_CAP: Chf = Chf::from_francs(700);

/// Spending above the deductible at which the coinsurance cap binds.
pub fn cap_exhaustion_point(deductible: Deductible) -> Chf {
    deductible.amount() + Chf(COINSURANCE_CAP.0 * 100 / COINSURANCE_RATE_PERCENT)
}

/// Annual out-of-pocket cost: `min(spend, d) + min(0.1·max(0, spend − d), 700)`.
/// The coinsurance share is rounded half-up to the centime.
pub fn out_of_pocket(annual_spend: Chf, deductible: Deductible) -> Result<Chf> {
    if annual_spend.0 < 0 {
        return Err(MarketError::NegativeSpend(annual_spend));
    }
    let d = deductible.amount();
    let below = annual_spend.min(d);
    let excess = (annual_spend - d).max(Chf::ZERO);
    let coinsurance = Chf((excess.0 * COINSURANCE_RATE_PERCENT + 50) / 100).min(COINSURANCE_CAP);
    Ok(below + coinsurance)
}

/// Share of one extra franc of spending paid by the insured: 1 below the
/// deductible, 0.1 in the coinsurance band, 0 once the cap is exhausted.
/// At a kink the rate to the right is returned.
pub fn marginal_price(annual_spend: Chf, deductible: Deductible) -> Result<f64> {
    if annual_spend.0 < 0 {
        return Err(MarketError::NegativeSpend(annual_spend));
    }
    Ok(if annual_spend < deductible.amount() {
        1.0
    } else if annual_spend < cap_exhaustion_point(deductible) {
        COINSURANCE_RATE_PERCENT as f64 / 100.0
    } else {
        0.0
    })
}

/// Market cell on which the average-premium instrument is defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PremiumCell {
    pub canton: Canton,
    pub age_group: AgeGroup,
    pub deductible: Deductible,
    pub plan_type: PlanType,
}

impl fmt::Display for PremiumCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.canton,
            self.age_group.code(),
            self.deductible,
            self.plan_type.code()
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PremiumRow {
    pub cell: PremiumCell,
    pub insurer: String,
    pub monthly_premium: Chf,
}

/// Validated, immutable premium listing.
#[derive(Debug, Clone, Default)]
pub struct PremiumTable {
    rows: Vec<PremiumRow>,
    by_cell: BTreeMap<PremiumCell, Vec<usize>>,
}

impl PremiumTable {
    pub fn from_rows(rows: Vec<PremiumRow>) -> Result<Self> {
        let mut table = PremiumTable::default();
        for (i, row) in rows.into_iter().enumerate() {
            table.push(row, i + 1)?;
        }
        Ok(table)
    }

    fn push(&mut self, row: PremiumRow, line: usize) -> Result<()> {
        if row.monthly_premium.0 <= 0 {
            return Err(MarketError::Parse { line, message: format!("premium {} must be positive", row.monthly_premium) });
        }
        let slot = self.by_cell.entry(row.cell).or_default();
        if slot.iter().any(|&j| self.rows[j].insurer == row.insurer) {
            return Err(MarketError::Duplicate { line, cell: row.cell, insurer: row.insurer });
        }
        slot.push(self.rows.len());
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[PremiumRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Unweighted mean monthly premium across insurers in a cell.
    pub fn average_market_premium(&self, cell: PremiumCell) -> Result<f64> {
        let idx = self.by_cell.get(&cell).filter(|v| !v.is_empty()).ok_or(MarketError::EmptyCell(cell))?;
        // integer centime sum keeps the mean independent of row order
        let total: i64 = idx.iter().map(|&i| self.rows[i].monthly_premium.0).sum();
        Ok(total as f64 / idx.len() as f64 / 100.0)
    }
}

pub fn average_market_premium(
    table: &PremiumTable,
    canton: Canton,
    age_group: AgeGroup,
    deductible: Deductible,
    plan_type: PlanType,
) -> Result<f64> {
    table.average_market_premium(PremiumCell { canton, age_group, deductible, plan_type })
}

pub const PREMIUM_CSV_HEADER: [&str; 6] = ["canton", "age_group", "deductible", "plan_type", "insurer", "monthly_premium"];

/// Reads the canonical premium CSV
/// (`canton,age_group,deductible,plan_type,insurer,monthly_premium`).
pub fn ingest_premium_csv<R: Read>(source: R) -> Result<PremiumTable> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(source);
    let header = reader.headers().map_err(|e| MarketError::Io(e.to_string()))?.clone();
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != PREMIUM_CSV_HEADER {
        return Err(MarketError::Parse {
            line: 1,
            message: format!("expected header {:?}, found {:?}", PREMIUM_CSV_HEADER.join(","), got.join(",")),
        });
    }
    let mut table = PremiumTable::default();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| MarketError::Parse { line, message: e.to_string() })?;
        if record.len() != PREMIUM_CSV_HEADER.len() {
            return Err(MarketError::Parse {
                line,
                message: format!("expected {} columns, found {}", PREMIUM_CSV_HEADER.len(), record.len()),
            });
        }
        let field = |e: MarketError| MarketError::Parse { line, message: e.to_string() };
        let deductible_raw: i64 = record[2]
            .trim()
            .parse()
            .map_err(|_| MarketError::Parse { line, message: format!("deductible {:?} is not an integer", &record[2]) })?;
        let cell = PremiumCell {
            canton: record[0].parse().map_err(field)?,
            age_group: record[1].parse().map_err(field)?,
            deductible: Deductible::new(deductible_raw).map_err(field)?,
            plan_type: record[3].parse().map_err(field)?,
        };
        let insurer = record[4].trim().to_string();
        if insurer.is_empty() {
            return Err(MarketError::Parse { line, message: "empty insurer id".into() });
        }
        let monthly_premium: Chf = record[5]
            .parse()
            .map_err(|_| MarketError::Parse { line, message: format!("premium {:?} is not a CHF amount", &record[5]) })?;
        table.push(PremiumRow { cell, insurer, monthly_premium }, line)?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(x: i64) -> Deductible {
        Deductible::new(x).unwrap()
    }

    #[test]
    fn out_of_pocket_cases() {
        assert_eq!(out_of_pocket(Chf::ZERO, d(300)).unwrap(), Chf::ZERO);
        assert_eq!(out_of_pocket(Chf::from_francs(1300), d(300)).unwrap(), Chf::from_francs(400));
        assert_eq!(out_of_pocket(Chf::from_francs(100_000), d(300)).unwrap(), Chf::from_francs(1000));
        assert!(matches!(out_of_pocket(Chf::from_francs(-1), d(300)), Err(MarketError::NegativeSpend(_))));
        assert!(matches!(Deductible::new(400), Err(MarketError::OffMenuDeductible(400))));
    }

    #[test]
    fn marginal_price_bands() {
        assert_eq!(marginal_price(Chf::from_francs(100), d(300)).unwrap(), 1.0);
        assert_eq!(marginal_price(Chf::from_francs(2000), d(300)).unwrap(), 0.1);
        assert_eq!(marginal_price(Chf::from_francs(10_000), d(300)).unwrap(), 0.0);
        assert_eq!(cap_exhaustion_point(d(300)), Chf::from_francs(7300));
    }

    #[test]
    fn chf_parsing() {
        assert_eq!("12.5".parse::<Chf>().unwrap(), Chf::from_cents(1250));
        assert_eq!("400".parse::<Chf>().unwrap(), Chf::from_francs(400));
        assert_eq!("0.07".parse::<Chf>().unwrap(), Chf::from_cents(7));
        assert!("abc".parse::<Chf>().is_err());
        assert!("1.234".parse::<Chf>().is_err());
        assert_eq!(Chf::from_cents(-1205).to_string(), "-12.05");
    }

    fn cell(canton: &str, ded: i64) -> PremiumCell {
        PremiumCell {
            canton: canton.parse().unwrap(),
            age_group: AgeGroup::Adult,
            deductible: d(ded),
            plan_type: PlanType::Free,
        }
    }

    #[test]
    fn average_premium_cells() {
        let row = |ins: &str, p: i64| PremiumRow { cell: cell("ZH", 300), insurer: ins.into(), monthly_premium: Chf::from_francs(p) };
        let one = PremiumTable::from_rows(vec![row("a", 400)]).unwrap();
        assert_eq!(one.average_market_premium(cell("ZH", 300)).unwrap(), 400.0);
        let two = PremiumTable::from_rows(vec![row("a", 400), row("b", 500)]).unwrap();
        assert_eq!(two.average_market_premium(cell("ZH", 300)).unwrap(), 450.0);
        assert!(matches!(two.average_market_premium(cell("BE", 300)), Err(MarketError::EmptyCell(_))));
    }

    #[test]
    fn premium_csv_ingest() {
        let good = "canton,age_group,deductible,plan_type,insurer,monthly_premium\n\
                    ZH,adult,300,free,A,400.50\nZH,adult,300,free,B,420\nBE,adult,2500,managed,A,300\n";
        let t = ingest_premium_csv(good.as_bytes()).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.average_market_premium(cell("ZH", 300)).unwrap(), 410.25);

        let bad = "canton,age_group,deductible,plan_type,insurer,monthly_premium\nZH,adult,300,free,A,400\nZH,adult,300,free,B,abc\n";
        match ingest_premium_csv(bad.as_bytes()) {
            Err(MarketError::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("abc"));
            }
            other => panic!("unexpected {other:?}"),
        }

        let dup = "canton,age_group,deductible,plan_type,insurer,monthly_premium\nZH,adult,300,free,A,400\nZH,adult,300,free,A,410\n";
        assert!(matches!(ingest_premium_csv(dup.as_bytes()), Err(MarketError::Duplicate { line: 3, .. })));

        for (bad_row, needle) in [
            ("XX,adult,300,free,A,400", "canton"),
            ("ZH,senior,300,free,A,400", "age group"),
            ("ZH,adult,300,hmo,A,400", "plan type"),
            ("ZH,adult,400,free,A,400", "not on the menu"),
            ("ZH,adult,300,free,A", "columns"),
            ("ZH,adult,300,free,A,0", "positive"),
        ] {
            let src = format!("canton,age_group,deductible,plan_type,insurer,monthly_premium\n{bad_row}\n");
            let err = ingest_premium_csv(src.as_bytes()).unwrap_err().to_string();
            assert!(err.contains(needle), "{err}");
            assert!(err.contains("line 2"), "{err}");
        }
        assert!(ingest_premium_csv("a,b,c\n".as_bytes()).is_err());
    }

    fn arb_deductible() -> impl Strategy<Value = Deductible> {
        prop::sample::select(Deductible::MENU.to_vec()).prop_map(|v| Deductible::new(v as i64).unwrap())
    }

    proptest! {
        #[test]
        fn out_of_pocket_monotone_lipschitz_capped(ded in arb_deductible(), a in 0i64..2_000_000, b in 0i64..2_000_000) {
            let (lo, hi) = (Chf::from_cents(a.min(b)), Chf::from_cents(a.max(b)));
            let olo = out_of_pocket(lo, ded).unwrap();
            let ohi = out_of_pocket(hi, ded).unwrap();
            prop_assert!(olo <= ohi);
            // rounding to the centime can add at most one centime of slack
            prop_assert!((ohi - olo).cents() <= (hi - lo).cents() + 1);
            prop_assert!(ohi <= ded.amount() + COINSURANCE_CAP);
        }

        #[test]
        fn marginal_price_is_derivative_away_from_kinks(ded in arb_deductible(), francs in 20i64..20_000) {
            let d0 = ded.francs();
            prop_assume!([d0, d0 + 7000].iter().all(|k| (francs - k).abs() > 10));
            // whole-franc steps keep the 10% share exact in centimes
            let h = 10;
            let up = out_of_pocket(Chf::from_francs(francs + h), ded).unwrap().as_f64();
            let down = out_of_pocket(Chf::from_francs(francs - h), ded).unwrap().as_f64();
            let fd = (up - down) / (2 * h) as f64;
            let mp = marginal_price(Chf::from_francs(francs), ded).unwrap();
            prop_assert!((fd - mp).abs() < 1e-9, "{} vs {}", fd, mp);
        }

        #[test]
        fn out_of_pocket_non_decreasing_in_deductible(spend in 0i64..2_000_000) {
            let s = Chf::from_cents(spend);
            let values: Vec<Chf> = Deductible::all().map(|d| out_of_pocket(s, d).unwrap()).collect();
            prop_assert!(values.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn average_premium_permutation_invariant(prices in prop::collection::vec(1i64..100_000, 1..12), seed in any::<u64>()) {
            let rows: Vec<PremiumRow> = prices.iter().enumerate().map(|(i, &p)| PremiumRow {
                cell: cell("VD", 1000),
                insurer: format!("ins{i}"),
                monthly_premium: Chf::from_cents(p),
            }).collect();
            let mut shuffled = rows.clone();
            // deterministic rotation + reversal as the permutation
            let k = (seed % rows.len() as u64) as usize;
            shuffled.rotate_left(k);
            shuffled.reverse();
            let a = PremiumTable::from_rows(rows).unwrap().average_market_premium(cell("VD", 1000)).unwrap();
            let b = PremiumTable::from_rows(shuffled).unwrap().average_market_premium(cell("VD", 1000)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
