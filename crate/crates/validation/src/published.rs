//! Published WER rows and the N-WER identities they satisfy.

use avsr_core::metrics::{nwer, nwer_noise_dominant, EvalTable};
use avsr_core::Result;

/// Values are printed with one decimal; the slack absorbs binary
/// representation of a bound that is itself a one-decimal number.
pub const IDENTITY_TOLERANCE: f64 = 0.05;
const FLOAT_SLACK: f64 = 1e-9;

/// One row of a results table: per-SNR cells over the grid, the printed
/// category averages and the printed N-WER pair.
#[derive(Clone, Copy, Debug)]
pub struct PublishedRow {
    pub table: u8,
    pub method: &'static str,
    pub babble: [f64; 5],
    pub babble_avg: f64,
    pub speech: [f64; 5],
    pub speech_avg: f64,
    pub music_natural: [f64; 5],
    pub music_natural_avg: f64,
    pub nwer: f64,
    pub nwer_noise_dominant: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Identity {
    /// Mean of the category averages, music and natural weighted twice.
    Nwer,
    /// Mean of the cells at or below 0 dB.
    NoiseDominant,
}

impl Identity {
    pub fn as_str(self) -> &'static str {
        match self {
            Identity::Nwer => "N-WER",
            Identity::NoiseDominant => "N-WER noise-dominant",
        }
    }
}

#[derive(Clone, Debug)]
pub struct IdentityCheck {
    pub row: PublishedRow,
    pub identity: Identity,
    pub computed: f64,
    pub published: f64,
}

impl IdentityCheck {
    pub fn passed(&self) -> bool {
        (self.computed - self.published).abs() <= IDENTITY_TOLERANCE + FLOAT_SLACK
    }

    pub fn describe(&self) -> String {
        format!(
            "table {} {} {}: computed {:.4} published {:.1}",
            self.row.table,
            self.row.method,
            self.identity.as_str(),
            self.computed,
            self.published
        )
    }
}

pub fn check(row: &PublishedRow, identity: Identity) -> Result<IdentityCheck> {
    let (computed, published) = match identity {
        Identity::Nwer => (
            nwer(&EvalTable::from_category_averages(
                row.babble_avg,
                row.speech_avg,
                row.music_natural_avg,
            ))?,
            row.nwer,
        ),
        Identity::NoiseDominant => (
            nwer_noise_dominant(&EvalTable::with_merged_music_natural(
                row.babble,
                row.speech,
                row.music_natural,
            ))?,
            row.nwer_noise_dominant,
        ),
    };
    Ok(IdentityCheck {
        row: *row,
        identity,
        computed,
        published,
    })
}

macro_rules! row {
    ($table:expr, $method:expr,
     $b:expr, $ba:expr, $s:expr, $sa:expr, $m:expr, $ma:expr, $n:expr, $nd:expr) => {
        PublishedRow {
            table: $table,
            method: $method,
            babble: $b,
            babble_avg: $ba,
            speech: $s,
            speech_avg: $sa,
            music_natural: $m,
            music_natural_avg: $ma,
            nwer: $n,
            nwer_noise_dominant: $nd,
        }
    };
}

const OURS_CLEAN_SPEECH: [f64; 5] = [9.9, 5.2, 3.4, 2.3, 1.6];
const OURS_CLEAN_MN: [f64; 5] = [9.7, 4.9, 2.6, 2.0, 1.8];
const OURS_NOISY_SPEECH: [f64; 5] = [5.4, 3.2, 2.5, 1.8, 1.8];
const OURS_NOISY_MN: [f64; 5] = [8.7, 3.7, 2.4, 2.0, 1.7];
const OURS_LRS2_SPEECH: [f64; 5] = [7.5, 4.7, 3.8, 3.1, 2.9];
const OURS_LRS2_MN: [f64; 5] = [9.9, 6.0, 3.8, 3.3, 2.9];

/// LRS3 rows with a complete noise grid. Rows whose babble cells exist in
/// two variants appear once per variant.
pub const TABLE_ONE: [PublishedRow; 8] = [
    row!(1, "AV-HuBERT (clean PT)",
        [30.0, 15.2, 5.9, 2.7, 1.9], 11.1, [15.9, 7.5, 3.9, 2.4, 1.9], 6.3,
        [12.1, 5.9, 3.1, 2.2, 1.8], 5.0, 6.9, 10.0),
    row!(1, "UniVPM (clean PT)",
        [28.1, 13.8, 5.1, 2.2, 1.7], 10.2, [14.5, 6.7, 3.3, 2.1, 1.7], 5.7,
        [10.7, 5.2, 2.7, 1.9, 1.6], 4.4, 6.2, 9.1),
    row!(1, "Ours (clean PT, LRS3 babble)",
        [28.3, 13.4, 4.8, 2.4, 1.7], 10.1, OURS_CLEAN_SPEECH, 4.5, OURS_CLEAN_MN, 4.2, 5.7, 8.3),
    row!(1, "Ours (clean PT, MUSAN babble)",
        [24.8, 11.2, 4.6, 2.3, 1.9], 9.0, OURS_CLEAN_SPEECH, 4.5, OURS_CLEAN_MN, 4.2, 5.4, 7.8),
    row!(1, "AV-HuBERT (noisy PT)",
        [28.4, 13.4, 5.0, 2.6, 1.9], 10.3, [11.4, 4.6, 2.9, 2.2, 1.8], 4.6,
        [9.7, 4.7, 2.5, 1.9, 1.8], 4.1, 5.8, 8.3),
    row!(1, "UniVPM (noisy PT)",
        [26.8, 12.1, 4.0, 2.1, 1.6], 9.3, [10.4, 4.1, 2.5, 2.0, 1.6], 4.1,
        [8.7, 4.1, 2.1, 1.7, 1.5], 3.6, 5.2, 7.5),
    row!(1, "Ours (noisy PT, LRS3 babble)",
        [25.8, 11.9, 4.4, 2.4, 1.8], 9.3, OURS_NOISY_SPEECH, 2.9, OURS_NOISY_MN, 3.7, 4.9, 6.9),
    row!(1, "Ours (noisy PT, MUSAN babble)",
        [22.7, 9.9, 4.0, 2.2, 1.8], 8.1, OURS_NOISY_SPEECH, 2.9, OURS_NOISY_MN, 3.7, 4.6, 6.4),
];

/// LRS2 rows with a complete noise grid.
pub const TABLE_TWO: [PublishedRow; 4] = [
    row!(2, "AV-HuBERT",
        [31.7, 15.1, 6.3, 4.1, 3.2], 12.1, [8.6, 5.5, 4.2, 3.7, 3.3], 5.1,
        [11.0, 6.0, 4.3, 3.4, 3.0], 5.5, 7.1, 9.5),
    row!(2, "UniVPM",
        [30.1, 13.7, 5.7, 4.1, 3.2], 11.4, [7.5, 5.1, 3.4, 3.1, 2.8], 4.4,
        [10.9, 5.0, 3.8, 3.1, 2.8], 5.1, 6.5, 8.7),
    row!(2, "Ours (LRS3 babble)",
        [27.8, 12.6, 5.2, 3.7, 3.0], 10.4, OURS_LRS2_SPEECH, 4.4, OURS_LRS2_MN, 5.2, 6.3, 8.4),
    row!(2, "Ours (MUSAN babble)",
        [22.4, 10.1, 5.0, 3.7, 3.2], 8.9, OURS_LRS2_SPEECH, 4.4, OURS_LRS2_MN, 5.2, 5.9, 7.7),
];

/// The gated identities: the named LRS3 rows and every LRS2 row.
pub fn gated_checks() -> Result<Vec<IdentityCheck>> {
    let mut out = vec![
        check(&TABLE_ONE[4], Identity::Nwer)?,
        check(&TABLE_ONE[6], Identity::Nwer)?,
        check(&TABLE_ONE[7], Identity::NoiseDominant)?,
    ];
    for row in &TABLE_TWO {
        out.push(check(row, Identity::Nwer)?);
        out.push(check(row, Identity::NoiseDominant)?);
    }
    Ok(out)
}

/// Both identities on every LRS3 row.
pub fn table_one_sweep() -> Result<Vec<IdentityCheck>> {
    let mut out = Vec::new();
    for row in &TABLE_ONE {
        out.push(check(row, Identity::Nwer)?);
        out.push(check(row, Identity::NoiseDominant)?);
    }
    Ok(out)
}
