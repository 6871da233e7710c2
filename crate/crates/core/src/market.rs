//! Inter-microgrid energy settlement.
//!
//! Microgrids with a deficit buy, in index order, from the cheapest
//! microgrid that still has surplus (ties go to the lowest index). A seller
//! drops out once its surplus is used up. Whatever deficit remains is bought
//! from the distribution network. Unsold surplus is exported at the seller's
//! inter-MG price.
//!
//! Deviations here are signed *surplus*: positive means the microgrid
//! generates more than it consumes. This is `-P_de` in environment terms.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MarketError {
    #[error("{deviations} deviations but {prices} inter-MG prices")]
    LengthMismatch { deviations: usize, prices: usize },
    #[error("price must be positive and finite, got {0}")]
    BadPrice(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Counterparty {
    Mg(usize),
    Grid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trade {
    pub buyer: Counterparty,
    pub seller: Counterparty,
    pub kw: f64,
    pub price: f64,
}

impl Trade {
    pub fn cost(&self) -> f64 {
        self.kw * self.price
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SettlementResult {
    /// Deficit purchases in execution order: inter-MG trades, then grid top-ups.
    pub trades: Vec<Trade>,
    /// Per microgrid, kW bought from the distribution network.
    pub residual_from_grid: Vec<f64>,
    /// Per microgrid, surplus kW left over and exported.
    pub exported: Vec<f64>,
    /// Surplus exports as trades with the grid as buyer.
    pub exports: Vec<Trade>,
}

impl SettlementResult {
    pub fn bought_by(&self, mg: usize) -> f64 {
        self.trades.iter().filter(|t| t.buyer == Counterparty::Mg(mg)).map(|t| t.kw).sum()
    }

    pub fn sold_to_mgs_by(&self, mg: usize) -> f64 {
        self.trades.iter().filter(|t| t.seller == Counterparty::Mg(mg)).map(|t| t.kw).sum()
    }
}

fn check_price(p: f64) -> Result<(), MarketError> {
    if p > 0.0 && p.is_finite() {
        Ok(())
    } else {
        Err(MarketError::BadPrice(p))
    }
}

pub fn settle(surplus: &[f64], price_mg: &[f64], price_dpn: f64) -> Result<SettlementResult, MarketError> {
    if surplus.len() != price_mg.len() {
        return Err(MarketError::LengthMismatch { deviations: surplus.len(), prices: price_mg.len() });
    }
    check_price(price_dpn)?;
    price_mg.iter().try_for_each(|&p| check_price(p))?;

    let n = surplus.len();
    let mut available: Vec<f64> = surplus.iter().map(|&s| s.max(0.0)).collect();
    let mut result = SettlementResult { residual_from_grid: vec![0.0; n], exported: vec![0.0; n], ..Default::default() };

    for buyer in 0..n {
        let mut need = (-surplus[buyer]).max(0.0);
        while need > 0.0 {
            // argmin over price * L, L = 1 for sellers with surplus left, infinite otherwise
            let seller = (0..n)
                .filter(|&l| l != buyer && available[l] > 0.0)
                .min_by(|&a, &b| price_mg[a].total_cmp(&price_mg[b]).then(a.cmp(&b)));
            let Some(seller) = seller else { break };
            let kw = need.min(available[seller]);
            available[seller] -= kw;
            need -= kw;
            if available[seller] <= 0.0 {
                available[seller] = 0.0;
            }
            result.trades.push(Trade {
                buyer: Counterparty::Mg(buyer),
                seller: Counterparty::Mg(seller),
                kw,
                price: price_mg[seller],
            });
        }
        if need > 0.0 {
            result.residual_from_grid[buyer] = need;
            result.trades.push(Trade {
                buyer: Counterparty::Mg(buyer),
                seller: Counterparty::Grid,
                kw: need,
                price: price_dpn,
            });
        }
    }
    for (l, &left) in available.iter().enumerate() {
        if left > 0.0 {
            result.exported[l] = left;
            result.exports.push(Trade { buyer: Counterparty::Grid, seller: Counterparty::Mg(l), kw: left, price: price_mg[l] });
        }
    }
    Ok(result)
}

/// System reward: the sum of the per-microgrid rewards.
pub fn system_reward(per_mg_rewards: &[f64]) -> f64 {
    per_mg_rewards.iter().sum()
}
