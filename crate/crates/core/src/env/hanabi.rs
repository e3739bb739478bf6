//! Configurable Mini-Hanabi: standard Hanabi rules scaled down to a deck
//! small enough for exact belief enumeration, with factored categorical
//! observations and candidate-hand replay for search.

use super::{
    CardId, EnvError, FeatureSchema, Game, GroundedConstraints, HiddenFeatures,
    ObservationFeatures, Replay, Result, StepOutcome, TrajStep, Trajectory,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GameConfig {
    pub num_players: usize,
    pub num_colors: usize,
    pub max_rank: usize,
    /// Copies of each rank per color, counts_per_rank[r - 1] for rank r.
    pub counts_per_rank: Vec<usize>,
    pub hand_size: usize,
    pub info_tokens: usize,
    pub life_tokens: usize,
    pub max_turns: usize,
}

impl GameConfig {
    /// 2 colors, ranks 1-3 with copies (3, 2, 1), hand 2, 3 info tokens,
    /// 1 life: a 12-card deck that keeps exact enumeration fast.
    pub fn default_mini() -> Self {
        GameConfig {
            num_players: 2,
            num_colors: 2,
            max_rank: 3,
            counts_per_rank: vec![3, 2, 1],
            hand_size: 2,
            info_tokens: 3,
            life_tokens: 1,
            max_turns: 40,
        }
    }

    /// 5-identity variant (1 color, ranks 1-5): used where a C = 5
    /// vocabulary is wanted.
    pub fn five_identity() -> Self {
        GameConfig {
            num_players: 2,
            num_colors: 1,
            max_rank: 5,
            counts_per_rank: vec![3, 2, 2, 2, 1],
            hand_size: 2,
            info_tokens: 3,
            life_tokens: 1,
            max_turns: 40,
        }
    }

    pub fn deck_size(&self) -> usize {
        self.num_colors * self.counts_per_rank.iter().sum::<usize>()
    }

    pub fn num_identities(&self) -> usize {
        self.num_colors * self.max_rank
    }

    pub fn max_score(&self) -> usize {
        self.num_colors * self.max_rank
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_players != 2 {
            return Err(EnvError::Config("only 2 players supported".into()));
        }
        if self.counts_per_rank.len() != self.max_rank {
            return Err(EnvError::Config(
                "counts_per_rank length must equal max_rank".into(),
            ));
        }
        if self.counts_per_rank.iter().any(|&c| c == 0) {
            return Err(EnvError::Config("every rank needs at least one copy".into()));
        }
        if self.deck_size() < self.num_players * self.hand_size {
            return Err(EnvError::Config(format!(
                "deck of {} cannot deal {} hands of {}",
                self.deck_size(),
                self.num_players,
                self.hand_size
            )));
        }
        if self.num_colors == 0 || self.max_rank == 0 || self.hand_size == 0 {
            return Err(EnvError::Config("degenerate dimensions".into()));
        }
        Ok(())
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(self).expect("config serializes"));
        hasher.finalize().into()
    }

    pub fn color_of(&self, id: CardId) -> usize {
        id / self.max_rank
    }

    /// 1-based rank.
    pub fn rank_of(&self, id: CardId) -> usize {
        id % self.max_rank + 1
    }

    pub fn card_id(&self, color: usize, rank: usize) -> CardId {
        color * self.max_rank + (rank - 1)
    }

    pub fn copies_of(&self, id: CardId) -> usize {
        self.counts_per_rank[self.rank_of(id) - 1]
    }

    pub fn full_counts(&self) -> Vec<usize> {
        (0..self.num_identities()).map(|id| self.copies_of(id)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HanabiAction {
    Play(usize),
    Discard(usize),
    HintColor(usize),
    HintRank(usize),
}

impl HanabiAction {
    pub fn to_id(self, cfg: &GameConfig) -> usize {
        let h = cfg.hand_size;
        match self {
            HanabiAction::Play(s) => s,
            HanabiAction::Discard(s) => h + s,
            HanabiAction::HintColor(c) => 2 * h + c,
            HanabiAction::HintRank(r) => 2 * h + cfg.num_colors + (r - 1),
        }
    }

    pub fn from_id(id: usize, cfg: &GameConfig) -> Result<Self> {
        let h = cfg.hand_size;
        if id < h {
            Ok(HanabiAction::Play(id))
        } else if id < 2 * h {
            Ok(HanabiAction::Discard(id - h))
        } else if id < 2 * h + cfg.num_colors {
            Ok(HanabiAction::HintColor(id - 2 * h))
        } else if id < 2 * h + cfg.num_colors + cfg.max_rank {
            Ok(HanabiAction::HintRank(id - 2 * h - cfg.num_colors + 1))
        } else {
            Err(EnvError::IllegalAction { action: id })
        }
    }
}

pub fn num_actions(cfg: &GameConfig) -> usize {
    2 * cfg.hand_size + cfg.num_colors + cfg.max_rank
}

#[derive(Debug, Clone)]
pub struct HanabiState {
    /// Undealt cards in draw order.
    pub deck: Vec<CardId>,
    pub hands: Vec<Vec<CardId>>,
    /// Per player, per slot: allowed-color / allowed-rank bitmasks.
    pub color_masks: Vec<Vec<u8>>,
    pub rank_masks: Vec<Vec<u8>>,
    /// Per color: top rank played (0 = empty firework).
    pub fireworks: Vec<usize>,
    pub discard_counts: Vec<usize>,
    pub info_tokens: usize,
    pub life_tokens: usize,
    pub turn: usize,
    pub current_player: usize,
    pub last_action: Option<usize>,
    /// Turns remaining once the last card has been drawn.
    pub final_countdown: Option<usize>,
    pub terminal: bool,
    pub score: usize,
}

impl HanabiState {
    pub fn current_score(&self) -> usize {
        self.fireworks.iter().sum()
    }
}

/// Positions of each feature group in the flat feature vector.
#[derive(Debug, Clone)]
struct FeatureLayout {
    partner: usize,
    color_mask: usize,
    rank_mask: usize,
    own_hand_size: usize,
    fireworks: usize,
    info: usize,
    life: usize,
    deck: usize,
    last_action: usize,
    discards: usize,
}

pub struct MiniHanabi {
    pub config: GameConfig,
    schema: FeatureSchema,
    layout: FeatureLayout,
}

const DECK_BUCKETS_MAX: usize = 8;

impl MiniHanabi {
    pub fn new(config: GameConfig) -> Result<Self> {
        config.validate()?;
        let (schema, layout) = build_schema(&config);
        Ok(MiniHanabi {
            config,
            schema,
            layout,
        })
    }

    pub fn default_mini() -> Self {
        Self::new(GameConfig::default_mini()).expect("default config is valid")
    }

    fn deck_bucket_cardinality(&self) -> usize {
        let undealt = self.config.deck_size() - self.config.num_players * self.config.hand_size;
        (undealt + 1).min(DECK_BUCKETS_MAX)
    }

    fn deck_bucket(&self, deck_len: usize) -> u16 {
        deck_len.min(self.deck_bucket_cardinality() - 1) as u16
    }

    fn full_color_mask(&self) -> u8 {
        ((1u16 << self.config.num_colors) - 1) as u8
    }

    fn full_rank_mask(&self) -> u8 {
        ((1u16 << self.config.max_rank) - 1) as u8
    }

    fn draw(&self, state: &mut HanabiState, player: usize) {
        if state.deck.is_empty() {
            return;
        }
        let card = state.deck.remove(0);
        state.hands[player].push(card);
        state.color_masks[player].push(self.full_color_mask());
        state.rank_masks[player].push(self.full_rank_mask());
        if state.deck.is_empty() {
            state.final_countdown = Some(self.config.num_players);
        }
    }

    fn remove_slot(&self, state: &mut HanabiState, player: usize, slot: usize) -> CardId {
        state.color_masks[player].remove(slot);
        state.rank_masks[player].remove(slot);
        state.hands[player].remove(slot)
    }

    /// Deals a fresh game from an explicit full deck in draw order.
    pub fn new_game_with_deck(&self, mut full_deck: Vec<CardId>) -> HanabiState {
        let cfg = &self.config;
        let mut hands = Vec::new();
        let mut color_masks = Vec::new();
        let mut rank_masks = Vec::new();
        for _ in 0..cfg.num_players {
            let hand: Vec<CardId> = full_deck.drain(..cfg.hand_size).collect();
            color_masks.push(vec![self.full_color_mask(); hand.len()]);
            rank_masks.push(vec![self.full_rank_mask(); hand.len()]);
            hands.push(hand);
        }
        let final_countdown = if full_deck.is_empty() {
            Some(cfg.num_players)
        } else {
            None
        };
        HanabiState {
            deck: full_deck,
            hands,
            color_masks,
            rank_masks,
            fireworks: vec![0; cfg.num_colors],
            discard_counts: vec![0; cfg.num_identities()],
            info_tokens: cfg.info_tokens,
            life_tokens: cfg.life_tokens,
            turn: 0,
            current_player: 0,
            last_action: None,
            final_countdown,
            terminal: false,
            score: 0,
        }
    }

    pub fn semantic_label_of(&self, id: CardId, state: &HanabiState) -> SemanticClass {
        semantic_label(&self.config, id, state)
    }

    /// Typed accessors into a feature vector of this game's schema.
    pub fn view<'a>(&'a self, obs: &'a ObservationFeatures) -> ObsView<'a> {
        ObsView { game: self, obs }
    }

    /// The action as renamed by the color permutation `perm` (old -> new).
    pub fn relabel_action(&self, action: usize, perm: &[usize]) -> usize {
        match HanabiAction::from_id(action, &self.config).expect("valid action id") {
            HanabiAction::HintColor(c) => HanabiAction::HintColor(perm[c]).to_id(&self.config),
            other => other.to_id(&self.config),
        }
    }

    /// The observation as it would read if every color c were renamed to
    /// perm[c] throughout the game.
    pub fn relabel_observation(
        &self,
        obs: &ObservationFeatures,
        perm: &[usize],
    ) -> ObservationFeatures {
        let cfg = &self.config;
        let lay = &self.layout;
        debug_assert_eq!(perm.len(), cfg.num_colors);
        let relabel_card = |id: CardId| cfg.card_id(perm[cfg.color_of(id)], cfg.rank_of(id));
        let mut v = obs.values.clone();
        for s in 0..cfg.hand_size {
            let pv = obs.values[lay.partner + s];
            if pv > 0 {
                v[lay.partner + s] = relabel_card(pv as usize - 1) as u16 + 1;
            }
            let cm = obs.values[lay.color_mask + s];
            let mut nm = 0u16;
            for (c, &pc) in perm.iter().enumerate() {
                if cm & (1 << c) != 0 {
                    nm |= 1 << pc;
                }
            }
            v[lay.color_mask + s] = nm;
        }
        for (c, &pc) in perm.iter().enumerate() {
            v[lay.fireworks + pc] = obs.values[lay.fireworks + c];
        }
        for id in 0..cfg.num_identities() {
            v[lay.discards + relabel_card(id)] = obs.values[lay.discards + id];
        }
        let la = obs.values[lay.last_action];
        if la > 0 {
            v[lay.last_action] = self.relabel_action(la as usize - 1, perm) as u16 + 1;
        }
        ObservationFeatures { values: v }
    }
}

/// Read-only typed view over one Mini-Hanabi observation.
pub struct ObsView<'a> {
    game: &'a MiniHanabi,
    obs: &'a ObservationFeatures,
}

impl ObsView<'_> {
    pub fn partner_card(&self, slot: usize) -> Option<CardId> {
        let v = self.obs.values[self.game.layout.partner + slot];
        if v == 0 {
            None
        } else {
            Some(v as usize - 1)
        }
    }

    pub fn color_mask(&self, slot: usize) -> u8 {
        self.obs.values[self.game.layout.color_mask + slot] as u8
    }

    pub fn rank_mask(&self, slot: usize) -> u8 {
        self.obs.values[self.game.layout.rank_mask + slot] as u8
    }

    pub fn own_hand_size(&self) -> usize {
        self.obs.values[self.game.layout.own_hand_size] as usize
    }

    pub fn firework(&self, color: usize) -> usize {
        self.obs.values[self.game.layout.fireworks + color] as usize
    }

    pub fn info_tokens(&self) -> usize {
        self.obs.values[self.game.layout.info] as usize
    }

    pub fn life_tokens(&self) -> usize {
        self.obs.values[self.game.layout.life] as usize
    }

    pub fn deck_bucket(&self) -> usize {
        self.obs.values[self.game.layout.deck] as usize
    }

    pub fn last_action(&self) -> Option<usize> {
        let v = self.obs.values[self.game.layout.last_action];
        if v == 0 {
            None
        } else {
            Some(v as usize - 1)
        }
    }

    pub fn discard_count(&self, id: CardId) -> usize {
        self.obs.values[self.game.layout.discards + id] as usize
    }
}

/// Actionability of a card identity in a given public state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SemanticClass {
    Playable,
    Discardable,
    Other,
}

impl SemanticClass {
    pub fn index(self) -> usize {
        match self {
            SemanticClass::Playable => 0,
            SemanticClass::Discardable => 1,
            SemanticClass::Other => 2,
        }
    }
}

/// Playable iff next in its firework; discardable iff already played or
/// dead (some lower rank of its color is fully discarded and unplayed).
pub fn semantic_label(cfg: &GameConfig, id: CardId, state: &HanabiState) -> SemanticClass {
    let color = cfg.color_of(id);
    let rank = cfg.rank_of(id);
    let height = state.fireworks[color];
    if rank == height + 1 {
        return SemanticClass::Playable;
    }
    if rank <= height {
        return SemanticClass::Discardable;
    }
    // dead if any needed rank below it can no longer be played
    for needed in (height + 1)..rank {
        let nid = cfg.card_id(color, needed);
        if state.discard_counts[nid] == cfg.copies_of(nid) {
            return SemanticClass::Discardable;
        }
    }
    SemanticClass::Other
}

fn build_schema(cfg: &GameConfig) -> (FeatureSchema, FeatureLayout) {
    let mut names = Vec::new();
    let mut cards = Vec::new();
    let c = cfg.num_identities();
    let undealt = cfg.deck_size() - cfg.num_players * cfg.hand_size;
    let deck_card = (undealt + 1).min(DECK_BUCKETS_MAX);

    let partner = names.len();
    for s in 0..cfg.hand_size {
        names.push(format!("partner_card_{s}"));
        cards.push(c + 1);
    }
    let color_mask = names.len();
    for s in 0..cfg.hand_size {
        names.push(format!("own_color_mask_{s}"));
        cards.push(1 << cfg.num_colors);
    }
    let rank_mask = names.len();
    for s in 0..cfg.hand_size {
        names.push(format!("own_rank_mask_{s}"));
        cards.push(1 << cfg.max_rank);
    }
    let own_hand_size = names.len();
    names.push("own_hand_size".into());
    cards.push(cfg.hand_size + 1);
    let fireworks = names.len();
    for col in 0..cfg.num_colors {
        names.push(format!("firework_{col}"));
        cards.push(cfg.max_rank + 1);
    }
    let info = names.len();
    names.push("info_tokens".into());
    cards.push(cfg.info_tokens + 1);
    let life = names.len();
    names.push("life_tokens".into());
    cards.push(cfg.life_tokens + 1);
    let deck = names.len();
    names.push("deck_bucket".into());
    cards.push(deck_card);
    let last_action = names.len();
    names.push("last_action".into());
    cards.push(num_actions(cfg) + 1);
    let discards = names.len();
    for id in 0..c {
        names.push(format!("discards_{id}"));
        cards.push(cfg.copies_of(id) + 1);
    }

    (
        FeatureSchema {
            names,
            cardinalities: cards,
        },
        FeatureLayout {
            partner,
            color_mask,
            rank_mask,
            own_hand_size,
            fireworks,
            info,
            life,
            deck,
            last_action,
            discards,
        },
    )
}

impl Game for MiniHanabi {
    type State = HanabiState;

    fn num_actions(&self) -> usize {
        num_actions(&self.config)
    }

    fn feature_schema(&self) -> &FeatureSchema {
        &self.schema
    }

    fn hidden_slots(&self) -> usize {
        self.config.hand_size
    }

    fn num_identities(&self) -> usize {
        self.config.num_identities()
    }

    fn max_turns(&self) -> usize {
        self.config.max_turns
    }

    fn max_score(&self) -> f64 {
        self.config.max_score() as f64
    }

    fn new_game(&self, seed: u64) -> HanabiState {
        let cfg = &self.config;
        let mut deck: Vec<CardId> = Vec::with_capacity(cfg.deck_size());
        for id in 0..cfg.num_identities() {
            for _ in 0..cfg.copies_of(id) {
                deck.push(id);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        deck.shuffle(&mut rng);
        self.new_game_with_deck(deck)
    }

    fn is_terminal(&self, state: &HanabiState) -> bool {
        state.terminal
    }

    fn current_player(&self, state: &HanabiState) -> usize {
        state.current_player
    }

    fn legal_actions(&self, state: &HanabiState) -> Result<Vec<usize>> {
        if state.terminal {
            return Err(EnvError::Contract(
                "legal_actions on a terminal state".into(),
            ));
        }
        let cfg = &self.config;
        let p = state.current_player;
        let partner = 1 - p;
        let mut out = Vec::new();
        for s in 0..state.hands[p].len() {
            out.push(HanabiAction::Play(s).to_id(cfg));
        }
        if state.info_tokens < cfg.info_tokens {
            for s in 0..state.hands[p].len() {
                out.push(HanabiAction::Discard(s).to_id(cfg));
            }
        }
        if state.info_tokens > 0 {
            for color in 0..cfg.num_colors {
                if state.hands[partner].iter().any(|&c| cfg.color_of(c) == color) {
                    out.push(HanabiAction::HintColor(color).to_id(cfg));
                }
            }
            for rank in 1..=cfg.max_rank {
                if state.hands[partner].iter().any(|&c| cfg.rank_of(c) == rank) {
                    out.push(HanabiAction::HintRank(rank).to_id(cfg));
                }
            }
        }
        Ok(out)
    }

    fn step(&self, state: &HanabiState, action: usize) -> Result<StepOutcome<HanabiState>> {
        let legal = self.legal_actions(state)?;
        if !legal.contains(&action) {
            return Err(EnvError::IllegalAction { action });
        }
        let cfg = &self.config;
        let mut s = state.clone();
        let p = s.current_player;
        let partner = 1 - p;
        let countdown_active = s.final_countdown.is_some();
        let mut reward = 0.0;

        match HanabiAction::from_id(action, cfg)? {
            HanabiAction::Play(slot) => {
                let card = self.remove_slot(&mut s, p, slot);
                let color = cfg.color_of(card);
                let rank = cfg.rank_of(card);
                if rank == s.fireworks[color] + 1 {
                    s.fireworks[color] = rank;
                    s.score += 1;
                    reward = 1.0;
                    if rank == cfg.max_rank && s.info_tokens < cfg.info_tokens {
                        s.info_tokens += 1;
                    }
                } else {
                    s.discard_counts[card] += 1;
                    s.life_tokens -= 1;
                }
                self.draw(&mut s, p);
            }
            HanabiAction::Discard(slot) => {
                let card = self.remove_slot(&mut s, p, slot);
                s.discard_counts[card] += 1;
                s.info_tokens += 1;
                self.draw(&mut s, p);
            }
            HanabiAction::HintColor(color) => {
                s.info_tokens -= 1;
                for (slot, &card) in state.hands[partner].iter().enumerate() {
                    if cfg.color_of(card) == color {
                        s.color_masks[partner][slot] = 1 << color;
                    } else {
                        s.color_masks[partner][slot] &= !(1u8 << color);
                    }
                }
            }
            HanabiAction::HintRank(rank) => {
                s.info_tokens -= 1;
                for (slot, &card) in state.hands[partner].iter().enumerate() {
                    if cfg.rank_of(card) == rank {
                        s.rank_masks[partner][slot] = 1 << (rank - 1);
                    } else {
                        s.rank_masks[partner][slot] &= !(1u8 << (rank - 1));
                    }
                }
            }
        }

        s.last_action = Some(action);
        s.turn += 1;
        s.current_player = partner;

        if countdown_active {
            let left = s.final_countdown.unwrap() - 1;
            s.final_countdown = Some(left);
            if left == 0 {
                s.terminal = true;
            }
        }
        if s.fireworks.iter().all(|&h| h == cfg.max_rank) {
            s.terminal = true;
        }
        if s.turn >= cfg.max_turns {
            s.terminal = true;
        }
        if s.life_tokens == 0 {
            // official rule: fuse exhaustion scores 0; the terminal penalty
            // makes the undiscounted return equal the final score
            s.terminal = true;
            reward -= s.score as f64;
            s.score = 0;
        }

        Ok(StepOutcome {
            terminal: s.terminal,
            reward,
            state: s,
        })
    }

    fn observe(&self, state: &HanabiState, agent: usize) -> ObservationFeatures {
        let cfg = &self.config;
        let lay = &self.layout;
        let partner = 1 - agent;
        let mut v = vec![0u16; self.schema.num_features()];
        for s in 0..cfg.hand_size {
            v[lay.partner + s] = state.hands[partner]
                .get(s)
                .map(|&c| c as u16 + 1)
                .unwrap_or(0);
        }
        for s in 0..cfg.hand_size {
            v[lay.color_mask + s] = state.color_masks[agent]
                .get(s)
                .copied()
                .unwrap_or(self.full_color_mask()) as u16;
            v[lay.rank_mask + s] = state.rank_masks[agent]
                .get(s)
                .copied()
                .unwrap_or(self.full_rank_mask()) as u16;
        }
        v[lay.own_hand_size] = state.hands[agent].len() as u16;
        for c in 0..cfg.num_colors {
            v[lay.fireworks + c] = state.fireworks[c] as u16;
        }
        v[lay.info] = state.info_tokens as u16;
        v[lay.life] = state.life_tokens as u16;
        v[lay.deck] = self.deck_bucket(state.deck.len());
        v[lay.last_action] = state.last_action.map(|a| a as u16 + 1).unwrap_or(0);
        for id in 0..cfg.num_identities() {
            v[lay.discards + id] = state.discard_counts[id] as u16;
        }
        ObservationFeatures { values: v }
    }

    fn hidden_features(&self, state: &HanabiState, agent: usize) -> HiddenFeatures {
        let h = self.config.hand_size;
        let mut slots = vec![0usize; h];
        let mut occupied = vec![false; h];
        for (s, &card) in state.hands[agent].iter().enumerate() {
            slots[s] = card;
            occupied[s] = true;
        }
        HiddenFeatures { slots, occupied }
    }

    fn grounded_constraints(&self, traj: &Trajectory) -> GroundedConstraints {
        let cfg = &self.config;
        let lay = &self.layout;
        let obs = &traj.steps.last().expect("trajectory has steps").obs.values;
        let mut remaining = cfg.full_counts();
        for s in 0..cfg.hand_size {
            let pv = obs[lay.partner + s];
            if pv > 0 {
                remaining[pv as usize - 1] -= 1;
            }
        }
        for color in 0..cfg.num_colors {
            for rank in 1..=(obs[lay.fireworks + color] as usize) {
                remaining[cfg.card_id(color, rank)] -= 1;
            }
        }
        for id in 0..cfg.num_identities() {
            remaining[id] -= obs[lay.discards + id] as usize;
        }
        let own = obs[lay.own_hand_size] as usize;
        let mut slot_masks = Vec::with_capacity(cfg.hand_size);
        let mut occupied = Vec::with_capacity(cfg.hand_size);
        for s in 0..cfg.hand_size {
            let cm = obs[lay.color_mask + s] as u8;
            let rm = obs[lay.rank_mask + s] as u8;
            let mask: Vec<bool> = (0..cfg.num_identities())
                .map(|id| {
                    cm & (1 << cfg.color_of(id)) != 0 && rm & (1 << (cfg.rank_of(id) - 1)) != 0
                })
                .collect();
            slot_masks.push(mask);
            occupied.push(s < own);
        }
        GroundedConstraints {
            remaining_counts: remaining,
            slot_masks,
            occupied,
        }
    }

    fn replay_with_candidate(
        &self,
        traj: &Trajectory,
        candidate: &HiddenFeatures,
        seed: u64,
    ) -> Result<Replay<HanabiState>> {
        let cfg = &self.config;
        let constraints = self.grounded_constraints(traj);
        if !constraints.admits(candidate) {
            return Err(EnvError::Inconsistent(
                "candidate violates grounded counts or hint masks".into(),
            ));
        }
        let agent = traj.agent;
        let partner = 1 - agent;
        let lay = &self.layout;
        let h = cfg.hand_size;

        // Pass 1: structural replay assigning an identity to every card
        // reference (deal slot or n-th draw).
        let deal_count = cfg.num_players * h;
        let mut identities: Vec<Option<CardId>> = vec![None; cfg.deck_size()];
        // deal order: player 0's hand, then player 1's
        let mut hand_refs: Vec<Vec<usize>> = (0..cfg.num_players)
            .map(|p| (p * h..(p + 1) * h).collect())
            .collect();
        for (s, r) in hand_refs[partner].iter().enumerate() {
            let pv = traj.steps[0].obs.values[lay.partner + s];
            if pv == 0 {
                return Err(EnvError::Inconsistent(
                    "initial observation shows a short partner hand".into(),
                ));
            }
            identities[*r] = Some(pv as usize - 1);
        }
        let mut deck_remaining = cfg.deck_size() - deal_count;
        let mut next_ref = deal_count;
        let mut draw_order: Vec<usize> = Vec::new();

        for t in 1..traj.steps.len() {
            let step = &traj.steps[t];
            let actor = step
                .actor
                .ok_or_else(|| EnvError::Contract("step without actor".into()))?;
            let action = HanabiAction::from_id(
                step.action
                    .ok_or_else(|| EnvError::Contract("step without action".into()))?,
                cfg,
            )?;
            match action {
                HanabiAction::Play(slot) | HanabiAction::Discard(slot) => {
                    if slot >= hand_refs[actor].len() {
                        return Err(EnvError::Inconsistent("slot out of range in replay".into()));
                    }
                    let r = hand_refs[actor].remove(slot);
                    if actor == agent {
                        let id = step.own_reveal.ok_or_else(|| {
                            EnvError::Contract("own play/discard without reveal".into())
                        })?;
                        identities[r] = Some(id);
                    } else if identities[r].is_none() {
                        return Err(EnvError::Inconsistent(
                            "partner card left hand without known identity".into(),
                        ));
                    }
                    if deck_remaining > 0 {
                        let nr = next_ref;
                        next_ref += 1;
                        deck_remaining -= 1;
                        draw_order.push(nr);
                        hand_refs[actor].push(nr);
                        if actor == partner {
                            let slot_now = hand_refs[partner].len() - 1;
                            let pv = step.obs.values[lay.partner + slot_now];
                            if pv == 0 {
                                return Err(EnvError::Inconsistent(
                                    "drawn partner card not visible".into(),
                                ));
                            }
                            identities[nr] = Some(pv as usize - 1);
                        }
                    }
                }
                HanabiAction::HintColor(_) | HanabiAction::HintRank(_) => {}
            }
        }

        // agent's current hand takes the candidate identities
        let live: Vec<usize> = (0..h).filter(|&s| candidate.occupied[s]).collect();
        if live.len() != hand_refs[agent].len() {
            return Err(EnvError::Inconsistent(format!(
                "candidate occupies {} slots but replay ends with {}",
                live.len(),
                hand_refs[agent].len()
            )));
        }
        for (&s, &r) in live.iter().zip(hand_refs[agent].iter()) {
            identities[r] = Some(candidate.slots[s]);
        }

        // assemble the full deck: deal refs, consumed draws, then the
        // unseen remainder in seeded order
        let mut used = vec![0usize; cfg.num_identities()];
        let mut full_deck = Vec::with_capacity(cfg.deck_size());
        for r in 0..deal_count {
            let id = identities[r]
                .ok_or_else(|| EnvError::Inconsistent("unresolved dealt card".into()))?;
            used[id] += 1;
            full_deck.push(id);
        }
        for &r in &draw_order {
            let id = identities[r]
                .ok_or_else(|| EnvError::Inconsistent("unresolved drawn card".into()))?;
            used[id] += 1;
            full_deck.push(id);
        }
        let mut rest = Vec::new();
        for id in 0..cfg.num_identities() {
            let total = cfg.copies_of(id);
            if used[id] > total {
                return Err(EnvError::Inconsistent(format!(
                    "identity {id} used {} times but only {} exist",
                    used[id], total
                )));
            }
            for _ in used[id]..total {
                rest.push(id);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rest.shuffle(&mut rng);
        full_deck.extend(rest);

        // Pass 2: simulate with the real rules, rebuilding both histories.
        let mut state = self.new_game_with_deck(full_deck);
        let mut states = vec![state.clone()];
        let mut trajs: Vec<Trajectory> = (0..cfg.num_players)
            .map(|p| Trajectory::new(p, self.observe(&state, p)))
            .collect();
        for t in 1..traj.steps.len() {
            let step = &traj.steps[t];
            let actor = step.actor.unwrap();
            let action = step.action.unwrap();
            if state.current_player != actor {
                return Err(EnvError::Inconsistent("actor out of turn in replay".into()));
            }
            let pre_hand = state.hands[actor].clone();
            let outcome = self.step(&state, action).map_err(|e| {
                EnvError::Inconsistent(format!("recorded action illegal in replay: {e}"))
            })?;
            state = outcome.state;
            let reveal = match HanabiAction::from_id(action, cfg)? {
                HanabiAction::Play(s) | HanabiAction::Discard(s) => Some(pre_hand[s]),
                _ => None,
            };
            for p in 0..cfg.num_players {
                trajs[p].steps.push(TrajStep {
                    obs: self.observe(&state, p),
                    actor: Some(actor),
                    action: Some(action),
                    own_reveal: if p == actor { reveal } else { None },
                });
                trajs[p].rewards.push(outcome.reward);
                trajs[p].terminal = outcome.terminal;
            }
            states.push(state.clone());
        }

        // the agent's replayed observations must reproduce the originals
        for (t, step) in traj.steps.iter().enumerate() {
            if trajs[agent].steps[t].obs != step.obs {
                return Err(EnvError::Inconsistent(format!(
                    "replayed observation diverges at turn {t}"
                )));
            }
        }

        Ok(Replay {
            states,
            trajectories: trajs,
        })
    }
}
